//! Ground-truth solvers and label-quality measurements.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{distill_bandit, distill_dense, distill_sparse, DatagenError, Dataset};
use crate::env::{sample_env, ActionId, EnvError, EnvFamily, EnvInstance, Policy, RewardKind, Split};
use crate::rng::{domain, RngStream};
use crate::suite::{grid_step, sparse_reward, Cell, GridParams, NUM_GRID_ACTIONS};

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("cannot resolve environment tag {tag:?}: {source}")]
    UnknownEnvTag { tag: String, source: EnvError },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
}

/// Agreement of labels with the oracle-optimal action sets.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleReport {
    pub agreement_rate: f64,
    /// Grid tasks: query-to-goal Manhattan distance -> agreement rate.
    pub per_distance: BTreeMap<usize, f64>,
    pub per_distance_count: BTreeMap<usize, usize>,
    pub sample_count: usize,
}

impl OracleReport {
    fn from_hits(hits: &[(Option<usize>, bool)]) -> Self {
        let mut by_d: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for &(d, ok) in hits {
            if let Some(d) = d {
                let e = by_d.entry(d).or_default();
                e.0 += ok as usize;
                e.1 += 1;
            }
        }
        let n = hits.len();
        let good = hits.iter().filter(|h| h.1).count();
        Self {
            agreement_rate: if n == 0 { 0.0 } else { good as f64 / n as f64 },
            per_distance: by_d.iter().map(|(&d, &(g, c))| (d, g as f64 / c as f64)).collect(),
            per_distance_count: by_d.iter().map(|(&d, &(_, c))| (d, c)).collect(),
            sample_count: n,
        }
    }
}

/// Index of the largest mean, ties to the lowest index.
pub fn optimal_arm(means: &[f64]) -> ActionId {
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        if m > means[best] {
            best = i;
        }
    }
    ActionId(best)
}

/// Expected suboptimality of a uniformly random arm choice.
pub fn uniform_suboptimality(means: &[f64]) -> f64 {
    let max = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max - means.iter().sum::<f64>() / means.len() as f64
}

/// Actions whose successor is closest to the goal in Manhattan distance.
///
/// Away from the goal these are the moves that reduce the distance. At the
/// goal they are `stay` plus any move that a wall clamps back onto the goal.
pub fn grid_optimal_actions(g: &GridParams, s: Cell) -> Vec<ActionId> {
    let dist = |a: usize| grid_step(g, s, ActionId(a)).manhattan(g.goal);
    let best = (0..NUM_GRID_ACTIONS).map(dist).min().expect("grid has actions");
    (0..NUM_GRID_ACTIONS).filter(|&a| dist(a) == best).map(ActionId).collect()
}

/// Finite-horizon optimal Q-values of a sparse grid, `q[state][action]`,
/// with `horizon` steps remaining after the first one is taken.
pub fn value_iteration(g: &GridParams, gamma: f64, horizon: usize) -> Vec<Vec<f64>> {
    let n = g.width * g.height;
    let mut v = vec![0.0; n];
    let mut q = vec![vec![0.0; NUM_GRID_ACTIONS]; n];
    for _ in 0..horizon.max(1) {
        for (i, row) in q.iter_mut().enumerate() {
            let s = g.cell_at(i);
            for (a, qa) in row.iter_mut().enumerate() {
                let next = grid_step(g, s, ActionId(a));
                *qa = sparse_reward(g, next) + gamma * v[g.index_of(next)];
            }
        }
        for (vi, row) in v.iter_mut().zip(&q) {
            *vi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    q
}

/// Actions within `tol` (relative) of the best Q-value.
pub fn argmax_set(q: &[f64], tol: f64) -> Vec<ActionId> {
    let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    q.iter()
        .enumerate()
        .filter(|(_, &v)| v >= best - tol * best.abs().max(1.0))
        .map(|(a, _)| ActionId(a))
        .collect()
}

/// Oracle-optimal actions at the query of a resolved environment.
fn optimal_set(env: &EnvInstance, query: &crate::env::StateVec) -> (Vec<ActionId>, Option<usize>) {
    match env.grid() {
        Some(g) => {
            let cell = g.cell_of(query).expect("query inside the grid");
            (grid_optimal_actions(g, cell), Some(cell.manhattan(g.goal)))
        }
        None => (vec![optimal_arm(env.arm_means().expect("bandit task"))], None),
    }
}

fn resolve(tag: &str) -> Result<EnvInstance, OracleError> {
    EnvInstance::from_tag(tag).map_err(|source| OracleError::UnknownEnvTag { tag: tag.to_string(), source })
}

/// Fraction of samples whose label is oracle-optimal at their query state.
pub fn label_accuracy(dataset: &Dataset) -> Result<OracleReport, OracleError> {
    let hits = dataset
        .samples
        .iter()
        .map(|s| {
            let env = resolve(&s.env_tag)?;
            let (opt, d) = optimal_set(&env, &s.query_state);
            Ok((d, opt.contains(&s.action_label)))
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    Ok(OracleReport::from_hits(&hits))
}

/// Exact behaviour of sparse distillation under the uniform random policy on
/// one grid task.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLabelLaw {
    /// Probability that a uniformly drawn query is accepted, per state.
    pub acceptance: Vec<f64>,
    /// `label[state][action]`: probability of the label given acceptance.
    pub label: Vec<Vec<f64>>,
}

impl SparseLabelLaw {
    /// Query distribution after rejection sampling.
    pub fn query_probs(&self) -> Vec<f64> {
        let total: f64 = self.acceptance.iter().sum();
        self.acceptance.iter().map(|a| a / total).collect()
    }

    /// Expected label accuracy and expected accuracy of a uniform random label.
    pub fn accuracy_and_density(&self, g: &GridParams) -> (f64, f64) {
        let mut acc = 0.0;
        let mut density = 0.0;
        for (i, p) in self.query_probs().into_iter().enumerate() {
            let opt = grid_optimal_actions(g, g.cell_at(i));
            acc += p * opt.iter().map(|a| self.label[i][a.0]).sum::<f64>();
            density += p * opt.len() as f64 / NUM_GRID_ACTIONS as f64;
        }
        (acc, density)
    }
}

/// Computes the label law of sparse distillation with trust horizon `n` from
/// first-hitting-time distributions of the uniform random walk, treating the
/// five first-action rollouts as independent and breaking ties toward the
/// lowest action index.
pub fn sparse_label_law(g: &GridParams, n: usize) -> SparseLabelLaw {
    let cells = g.width * g.height;
    let cap = n.saturating_sub(1);
    let step = |i: usize, a: usize| g.index_of(grid_step(g, g.cell_at(i), ActionId(a)));
    let goal = g.index_of(g.goal);
    // first[k][x]: probability that the walk from x first reaches the goal at step k.
    let mut first = vec![vec![0.0; cells]; cap + 1];
    for k in 1..=cap {
        for x in 0..cells {
            first[k][x] = (0..NUM_GRID_ACTIONS)
                .map(|a| {
                    let y = step(x, a);
                    if y == goal {
                        if k == 1 { 1.0 } else { 0.0 }
                    } else if k > 1 {
                        first[k - 1][y]
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
                / NUM_GRID_ACTIONS as f64;
        }
    }
    let mut acceptance = vec![0.0; cells];
    let mut label = vec![vec![0.0; NUM_GRID_ACTIONS]; cells];
    for s in 0..cells {
        // hit[a][t]: probability that the rollout after first action a is rewarded at step t.
        let hit: Vec<Vec<f64>> = (0..NUM_GRID_ACTIONS)
            .map(|a| {
                let s1 = step(s, a);
                let mut p = vec![0.0; cap + 1];
                for (t, pt) in p.iter_mut().enumerate().skip(1) {
                    *pt = if s1 == goal { (t == 1) as u8 as f64 } else if t >= 2 { first[t - 1][s1] } else { 0.0 };
                }
                p
            })
            .collect();
        // later[a][t]: probability that action a has no reward within steps 1..=t.
        let later = |a: usize, t: usize| 1.0 - hit[a][1..=t].iter().sum::<f64>();
        let reject: f64 = (0..NUM_GRID_ACTIONS).map(|a| later(a, cap)).product();
        acceptance[s] = 1.0 - reject;
        if acceptance[s] <= 0.0 {
            continue;
        }
        for a in 0..NUM_GRID_ACTIONS {
            let mut p = 0.0;
            for t in 1..=cap {
                let mut term = hit[a][t];
                for b in 0..NUM_GRID_ACTIONS {
                    if b < a {
                        term *= later(b, t);
                    } else if b > a {
                        term *= later(b, t - 1);
                    }
                }
                p += term;
            }
            label[s][a] = p / acceptance[s];
        }
    }
    SparseLabelLaw { acceptance, label }
}

/// Expected agreement of uniformly random labels on the dataset's queries.
pub fn random_label_density(dataset: &Dataset) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for s in &dataset.samples {
        let env = resolve(&s.env_tag)?;
        total += optimal_set(&env, &s.query_state).0.len() as f64 / env.num_actions() as f64;
    }
    Ok(if dataset.is_empty() { 0.0 } else { total / dataset.len() as f64 })
}

/// Where a dataset puts its queries relative to the goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCoverage {
    /// Distinct (task, query state) pairs.
    pub distinct_queries: usize,
    /// Share of queries at Manhattan distance <= 1 from the goal.
    pub near_goal_fraction: f64,
    pub mean_goal_distance: f64,
}

pub fn query_coverage(dataset: &Dataset) -> Result<QueryCoverage, OracleError> {
    let mut seen = HashSet::new();
    let mut near = 0usize;
    let mut dist = 0usize;
    for s in &dataset.samples {
        let env = resolve(&s.env_tag)?;
        let g = env.grid().ok_or_else(|| OracleError::UnknownEnvTag {
            tag: s.env_tag.clone(),
            source: EnvError::Unsupported("coverage is defined for grid tasks"),
        })?;
        let cell = g.cell_of(&s.query_state).expect("query inside the grid");
        let d = cell.manhattan(g.goal);
        seen.insert((g.goal, cell));
        near += (d <= 1) as usize;
        dist += d;
    }
    let n = dataset.len().max(1) as f64;
    Ok(QueryCoverage {
        distinct_queries: seen.len(),
        near_goal_fraction: near as f64 / n,
        mean_goal_distance: dist as f64 / n,
    })
}

/// How often the distiller's label is oracle-optimal on fresh draws.
///
/// Trial `i` draws its task first from stream `(master_seed, i)`, so runs
/// with different `n` see the same task sequence.
pub fn assumption_check(
    family: &str,
    policy: &Policy,
    n: usize,
    trials: usize,
    master_seed: u64,
) -> Result<OracleReport, OracleError> {
    let fam = EnvFamily::from_id(family).map_err(DatagenError::from)?;
    let hits = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::in_domain(master_seed, domain::ORACLE, i);
            let mut env = sample_env(fam.id(), Split::Train, &mut rng).map_err(DatagenError::from)?;
            let (q, a) = match env.spec().reward_kind {
                RewardKind::Bandit => distill_bandit(&mut env, policy, n, &mut rng)?,
                RewardKind::Dense => distill_dense(&mut env, policy, n, 0.99, &mut rng)?,
                RewardKind::Sparse => {
                    let t = env.spec().horizon;
                    let (q, a, _) = distill_sparse(&mut env, policy, n, t, 1_000_000, &mut rng)?;
                    (q, a)
                }
            };
            let (opt, d) = optimal_set(&env, &q);
            Ok((d, opt.contains(&a)))
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    Ok(OracleReport::from_hits(&hits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::{DOWN, LEFT, RIGHT, STAY, UP};

    #[test]
    fn optimal_arm_examples() {
        assert_eq!(optimal_arm(&[0.1, 0.9, 0.3, 0.2, 0.5]), ActionId(1));
        assert_eq!(optimal_arm(&[0.4; 5]), ActionId(0));
    }

    #[test]
    fn grid_optimal_examples() {
        let g = GridParams::darkroom(Cell::new(3, 3));
        assert_eq!(grid_optimal_actions(&g, Cell::new(0, 0)), vec![ActionId(DOWN), ActionId(RIGHT)]);
        assert_eq!(grid_optimal_actions(&g, Cell::new(3, 3)), vec![ActionId(STAY)]);
        assert_eq!(grid_optimal_actions(&g, Cell::new(3, 5)), vec![ActionId(UP)]);
        // A goal in a corner: moves into the walls also stay on it.
        let corner = GridParams::darkroom(Cell::new(0, 0));
        assert_eq!(grid_optimal_actions(&corner, Cell::new(0, 0)), vec![ActionId(UP), ActionId(LEFT), ActionId(STAY)]);
    }

    #[test]
    fn uniform_suboptimality_closed_form() {
        assert!((uniform_suboptimality(&[0.0, 1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(uniform_suboptimality(&[0.3; 5]), 0.0);
    }
}
