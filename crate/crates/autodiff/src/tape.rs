//! Recording tape and the primitive operations.
//!
//! Every primitive evaluates eagerly and appends one node. Node ids grow with
//! recording order, so reverse iteration is a valid topological order for
//! the backward sweep.

use crate::real::{gemm, gemm_view, MatView};
use crate::{AutodiffError, Real, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Fill value used by [`Tape::mask_fill`] ahead of a softmax. Large enough that
/// `exp` underflows to exactly zero in both element widths.
pub const MASK_VALUE: f64 = -1e9;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { x: Var },
    Gelu { x: Var, tanh: Vec<T> },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    MaskFill { x: Var, mask: Vec<bool> },
    CausalAttention { qkv: Var, segments: Vec<Segment>, heads: usize, head_dim: usize, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Sum { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-owner record of a computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn matrix_dims<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        debug_assert!(value.is_finite(), "non-finite value recorded");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = matrix_dims("add_row", self.value(x))?;
        if self.value(bias).len() != n {
            return Err(mismatch("add_row", format!("bias len {} vs cols {n}", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let t = self.value(x);
        let data = t.data().chunks(n).flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c)).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale { x, factor })
    }

    /// Row-wise layer normalization followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = matrix_dims("layer_norm", self.value(x))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch("layer_norm", format!("affine params must have length {n}")));
        }
        let nf = T::from_f64(n as f64);
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let tanh: Vec<T> = t.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::from_f64(0.5);
        let data = t.data().iter().zip(&tanh).map(|(&v, &th)| half * v * (T::one() + th)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Gelu { x, tanh })
    }

    /// Selects rows of `table` by index; also serves as an embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = matrix_dims("gather_rows", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(mismatch("gather_rows", format!("row {bad} out of {rows}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), n], out),
            Op::GatherRows { table, ids: ids.to_vec() },
        ))
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| mismatch("concat_cols", "no inputs".into()))?;
        let (m, _) = matrix_dims("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = matrix_dims("concat_cols", self.value(p))?;
            if pm != m {
                return Err(mismatch("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, total], out), Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > n {
            return Err(mismatch("slice_cols", format!("{start}+{len} exceeds {n} cols")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, len], out), Op::SliceCols { x, start }))
    }

    /// Replaces entries where `mask` is true with [`MASK_VALUE`].
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(mismatch("mask_fill", format!("mask len {} vs {}", mask.len(), t.len())));
        }
        let fill = T::from_f64(MASK_VALUE);
        let data = t.data().iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::MaskFill { x, mask: mask.to_vec() }))
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[rows, 3 * heads * head_dim]` laid out as all query heads,
    /// then all key heads, then all value heads. Each segment attends only
    /// within itself, and row `i` of a segment only to rows `0..=i`.
    /// Output is `[rows, heads * head_dim]` with heads concatenated.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        segments: &[Segment],
        heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let (rows, width) = matrix_dims("causal_attention", self.value(qkv))?;
        let inner = heads * head_dim;
        if width != 3 * inner {
            return Err(mismatch("causal_attention", format!("width {width} != 3*{heads}*{head_dim}")));
        }
        check_segments("causal_attention", segments, rows)?;
        let src = self.value(qkv).data();
        let scale = T::one() / T::from_f64(head_dim as f64).sqrt();
        let prob_len: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![T::zero(); prob_len];
        let mut out = vec![T::zero(); rows * inner];
        let mut offset = 0;
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let block = &mut probs[offset..offset + l * l];
                offset += l * l;
                let q = MatView::new(seg.start * width + h * head_dim, l, head_dim, width);
                let k = MatView::new(seg.start * width + inner + h * head_dim, l, head_dim, width);
                let v = MatView::new(seg.start * width + 2 * inner + h * head_dim, l, head_dim, width);
                let p = MatView::new(0, l, l, l);
                gemm_view(scale, src, q, src, k.t(), T::zero(), block, p);
                for (i, row) in block.chunks_mut(l).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                let o = MatView::new(seg.start * inner + h * head_dim, l, head_dim, inner);
                gemm_view(T::one(), block, p, src, v, T::zero(), &mut out, o);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, inner], out),
            Op::CausalAttention { qkv, segments: segments.to_vec(), heads, head_dim, probs },
        ))
    }

    /// `sum_i weights[i] * -log softmax(logits_i)[labels[i]]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let (m, n) = matrix_dims("cross_entropy", self.value(logits))?;
        if labels.len() != m || weights.len() != m {
            return Err(mismatch("cross_entropy", format!("{m} rows, {} labels, {} weights", labels.len(), weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(mismatch("cross_entropy", format!("label {bad} out of {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (i, row) in probs.chunks_mut(n).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += weights[i] * (lse - row[labels[i]]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy { logits, labels: labels.to_vec(), weights: weights.to_vec(), probs },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Reverse sweep from a scalar node. Gradients are kept for leaves only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", format!("loss has shape {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let mut da = vec![T::zero(); m * k];
                gemm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                accumulate(grads, *a, self.value(*a).shape(), da);
                let mut db = vec![T::zero(); k * n];
                gemm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                accumulate(grads, *b, self.value(*b).shape(), db);
            }
            Op::Transpose { x } => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gd[j * m + i];
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, g.shape(), gd.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                accumulate(grads, *b, g.shape(), gd.iter().zip(va).map(|(&x, &y)| x * y).collect());
            }
            Op::AddRow { x, bias } => {
                let n = g.cols();
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.shape(), gd.to_vec());
                accumulate(grads, *bias, self.value(*bias).shape(), db);
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.shape(), gd.iter().map(|&v| v * *factor).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = g.cols();
                let nf = T::from_f64(n as f64);
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for (i, r) in rstd.iter().enumerate() {
                    let gy = &gd[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let d = gy[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dgamma[j] += gy[j] * xh[j];
                        dbeta[j] += gy[j];
                    }
                    mean_d /= nf;
                    mean_dx /= nf;
                    for j in 0..n {
                        let d = gy[j] * gam[j];
                        dx[i * n + j] = *r * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
                accumulate(grads, *gamma, self.value(*gamma).shape(), dgamma);
                accumulate(grads, *beta, self.value(*beta).shape(), dbeta);
            }
            Op::Softmax { x } => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = vec![T::zero(); gd.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - s);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Gelu { x, tanh } => {
                let xs = self.value(*x).data();
                let dx = xs.iter().zip(tanh).zip(gd).map(|((&v, &th), &gv)| gv * gelu_grad(v, th)).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::GatherRows { table, ids } => {
                let shape = self.value(*table).shape();
                let n = shape[1];
                let mut dt = vec![T::zero(); shape[0] * n];
                for (r, &i) in ids.iter().enumerate() {
                    for (d, &v) in dt[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, shape, dt);
            }
            Op::ConcatCols { parts } => {
                let total = g.cols();
                let m = g.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Vec::with_capacity(m * w);
                    for i in 0..m {
                        dp.extend_from_slice(&gd[i * total + col..i * total + col + w]);
                    }
                    accumulate(grads, p, self.value(p).shape(), dp);
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.value(*x).shape();
                let n = shape[1];
                let w = g.cols();
                let mut dx = vec![T::zero(); shape[0] * n];
                for i in 0..shape[0] {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, shape, dx);
            }
            Op::MaskFill { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&v, &m)| if m { T::zero() } else { v }).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::CausalAttention { qkv, segments, heads, head_dim, probs } => {
                let src = self.value(*qkv).data();
                let width = self.value(*qkv).cols();
                let dh = *head_dim;
                let inner = heads * dh;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let mut dqkv = vec![T::zero(); src.len()];
                let mut ds = Vec::new();
                let mut offset = 0;
                for seg in segments {
                    let l = seg.len;
                    ds.clear();
                    ds.resize(l * l, T::zero());
                    for h in 0..*heads {
                        let block = &probs[offset..offset + l * l];
                        offset += l * l;
                        let q = MatView::new(seg.start * width + h * dh, l, dh, width);
                        let k = MatView::new(seg.start * width + inner + h * dh, l, dh, width);
                        let v = MatView::new(seg.start * width + 2 * inner + h * dh, l, dh, width);
                        let go = MatView::new(seg.start * inner + h * dh, l, dh, inner);
                        let p = MatView::new(0, l, l, l);
                        // dP = dO V^T, then the softmax Jacobian row by row.
                        gemm_view(T::one(), gd, go, src, v.t(), T::zero(), &mut ds, p);
                        for (prow, drow) in block.chunks(l).zip(ds.chunks_mut(l)) {
                            let s: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (d, &pv) in drow.iter_mut().zip(prow) {
                                *d = pv * (*d - s) * scale;
                            }
                        }
                        gemm_view(T::one(), block, p.t(), gd, go, T::one(), &mut dqkv, v);
                        gemm_view(T::one(), &ds, p, src, k, T::one(), &mut dqkv, q);
                        gemm_view(T::one(), &ds, p.t(), src, q, T::one(), &mut dqkv, k);
                    }
                }
                accumulate(grads, *qkv, self.value(*qkv).shape(), dqkv);
            }
            Op::CrossEntropy { logits, labels, weights, probs } => {
                let n = self.value(*logits).cols();
                let up = gd[0];
                let mut dl = probs.clone();
                for (i, row) in dl.chunks_mut(n).enumerate() {
                    row[labels[i]] -= T::one();
                    let w = weights[i] * up;
                    for v in row.iter_mut() {
                        *v *= w;
                    }
                }
                accumulate(grads, *logits, self.value(*logits).shape(), dl);
            }
            Op::Sum { x } => {
                let shape = self.value(*x).shape();
                accumulate(grads, *x, shape, vec![gd[0]; self.value(*x).len()]);
            }
        }
    }
}

fn check_segments(op: &'static str, segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.len == 0 {
            return Err(mismatch(op, format!("segments must tile rows contiguously, got {segments:?}")));
        }
        next = s.start + s.len;
    }
    if next != rows {
        return Err(mismatch(op, format!("segments cover {next} of {rows} rows")));
    }
    Ok(())
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::from_parts(shape.to_vec(), data);
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) * (x + 0.044715 x^3))`, through `exp`, which is much
/// cheaper than the library `tanh`.
fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let limit = T::from_f64(20.0);
    let u = (c * (x + a * x * x * x)).max(-limit).min(limit);
    let e = (u + u).exp();
    (e - T::one()) / (e + T::one())
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
/// Gradients are kept for leaves only.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
