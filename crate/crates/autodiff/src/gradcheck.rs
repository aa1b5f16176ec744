//! Central finite differences, used as an independent check on `backward`.
//!
//! Nothing here touches the tape; callers supply a closure that evaluates the
//! scalar loss from scratch for a perturbed input.

/// Relative error with an absolute floor so near-zero gradients compare by
/// absolute difference.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(x + eps) - f(x - eps)) / (2 eps)` for coordinate `index` of `x`.
pub fn central_difference<F>(x: &mut [f64], index: usize, eps: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = x[index];
    x[index] = orig + eps;
    let plus = f(x);
    x[index] = orig - eps;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * eps)
}
