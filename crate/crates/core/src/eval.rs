//! Offline and online deployment of a frozen agent on held-out tasks.
//!
//! All test environments of one evaluation advance in lockstep, so a model
//! agent answers every environment's query with one batched forward pass.
//! Test tasks, contexts and action draws come from per-environment streams of
//! the master seed, which makes the environment set identical across the
//! agents being compared.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use sad_autodiff::Real;
use serde::{Deserialize, Serialize};

use crate::datagen::{collect_context, DatagenError};
use crate::env::{sample_categorical, sample_env, ActionId, EnvError, EnvFamily, EnvInstance, GoalSplit, Policy, Split, StateVec, Transition};
use crate::model::{argmax, softmax, ModelError, ModelParams, PredictMode, Sequence};
use crate::oracle::{grid_optimal_actions, optimal_arm};
use crate::rng::{domain, RngStream};
use crate::suite::{GridParams, Task};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("agent expects state_dim {agent_state_dim} and {agent_actions} actions, family {family} has {state_dim} and {actions}")]
    FamilyMismatch {
        family: String,
        agent_state_dim: usize,
        agent_actions: usize,
        state_dim: usize,
        actions: usize,
    },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// One decision request: the environment (for stubs that may peek at the
/// task), the conditioning context and the query state.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub env: &'a EnvInstance,
    pub context: &'a [Transition],
    pub query: &'a StateVec,
}

/// A frozen decision maker.
pub trait Agent {
    /// `(state_dim, num_actions)` the agent was built for.
    fn shape(&self) -> (usize, usize);

    /// Action distribution for every query, conditioned on its full context.
    fn policies(&self, queries: &[Query<'_>], mode: PredictMode) -> Result<Vec<Vec<f64>>>;

    /// Action distributions after each context prefix `0..=len` of one query.
    fn prefix_policies(&self, q: Query<'_>, mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        let qs: Vec<Query<'_>> = (0..=q.context.len()).map(|h| Query { context: &q.context[..h], ..q }).collect();
        self.policies(&qs, mode)
    }
}

fn one_hot(n: usize, a: ActionId) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[a.0] = 1.0;
    v
}

fn row_policy(logits: &[f64], mode: PredictMode) -> Vec<f64> {
    match mode {
        PredictMode::Greedy => one_hot(logits.len(), argmax(logits)),
        PredictMode::Sample => softmax(logits),
    }
}

/// A trained transformer.
pub struct ModelAgent<'a, T> {
    pub params: &'a ModelParams<T>,
}

impl<T: Real> Agent for ModelAgent<'_, T> {
    fn shape(&self) -> (usize, usize) {
        (self.params.config.state_dim, self.params.config.num_actions)
    }

    fn policies(&self, queries: &[Query<'_>], mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<Sequence<'_>> = queries.iter().map(|q| Sequence { context: q.context, query: q.query }).collect();
        let out = self.params.forward_batch(&seqs)?;
        Ok(out
            .iter()
            .map(|t| {
                let last: Vec<f64> = t.row(t.rows() - 1).iter().map(|v| v.as_f64()).collect();
                row_policy(&last, mode)
            })
            .collect())
    }

    /// One forward pass; row `h` conditions on the first `h` transitions.
    fn prefix_policies(&self, q: Query<'_>, mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        let t = self.params.forward(q.context, q.query)?;
        Ok((0..t.rows())
            .map(|r| {
                let row: Vec<f64> = t.row(r).iter().map(|v| v.as_f64()).collect();
                row_policy(&row, mode)
            })
            .collect())
    }
}

/// Always picks an optimal action of the true task.
pub struct OracleAgent {
    pub shape: (usize, usize),
}

/// Uniform over actions, whatever the context.
pub struct UniformAgent {
    pub shape: (usize, usize),
}

/// Always pulls the arm with the lowest mean.
pub struct WorstArmAgent {
    pub shape: (usize, usize),
}

impl OracleAgent {
    pub fn for_family(family: EnvFamily) -> Self {
        let s = family.spec();
        Self { shape: (s.state_dim, s.num_actions) }
    }
}

impl UniformAgent {
    pub fn for_family(family: EnvFamily) -> Self {
        let s = family.spec();
        Self { shape: (s.state_dim, s.num_actions) }
    }
}

impl WorstArmAgent {
    pub fn for_family(family: EnvFamily) -> Self {
        let s = family.spec();
        Self { shape: (s.state_dim, s.num_actions) }
    }
}

impl Agent for OracleAgent {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn policies(&self, queries: &[Query<'_>], _mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let n = q.env.num_actions();
                match q.env.task() {
                    Task::Gaussian(p) => one_hot(n, optimal_arm(&p.means)),
                    Task::Bernoulli(p) => one_hot(n, optimal_arm(&p.means)),
                    Task::Darkroom(g) | Task::DenseGrid(g) => {
                        let cell = g.cell_of(q.query).expect("query inside the grid");
                        one_hot(n, grid_optimal_actions(g, cell)[0])
                    }
                }
            })
            .collect())
    }
}

impl Agent for UniformAgent {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn policies(&self, queries: &[Query<'_>], _mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        Ok(queries.iter().map(|q| vec![1.0 / q.env.num_actions() as f64; q.env.num_actions()]).collect())
    }
}

impl Agent for WorstArmAgent {
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn policies(&self, queries: &[Query<'_>], _mode: PredictMode) -> Result<Vec<Vec<f64>>> {
        Ok(queries
            .iter()
            .map(|q| {
                let m = q.env.arm_means().expect("worst-arm agent needs a bandit");
                let worst = (0..m.len()).fold(0, |b, i| if m[i] < m[b] { i } else { b });
                one_hot(m.len(), ActionId(worst))
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SuboptimalityVsHorizon,
    /// Offline grid return with a frozen context of each length.
    ReturnVsHorizon,
    CumulativeRegretVsStep,
    ReturnVsEpisode,
}

impl MetricKind {
    pub fn id(self) -> &'static str {
        match self {
            MetricKind::SuboptimalityVsHorizon => "suboptimality_vs_horizon",
            MetricKind::ReturnVsHorizon => "return_vs_horizon",
            MetricKind::CumulativeRegretVsStep => "cumulative_regret_vs_step",
            MetricKind::ReturnVsEpisode => "return_vs_episode",
        }
    }

    pub const ALL: [MetricKind; 4] = [
        MetricKind::SuboptimalityVsHorizon,
        MetricKind::ReturnVsHorizon,
        MetricKind::CumulativeRegretVsStep,
        MetricKind::ReturnVsEpisode,
    ];

    pub fn from_id(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == s)
    }

    /// Whether smaller values are better.
    pub fn lower_is_better(self) -> bool {
        matches!(self, MetricKind::SuboptimalityVsHorizon | MetricKind::CumulativeRegretVsStep)
    }
}

/// A curve averaged over test environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub kind: MetricKind,
    pub x: Vec<usize>,
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub method: String,
    pub family: String,
    pub seed: u64,
}

impl MetricSeries {
    /// Aggregates `values[env][point]` over environments.
    pub fn from_samples(kind: MetricKind, x: Vec<usize>, values: &[Vec<f64>], family: &str, seed: u64) -> Self {
        let n = values.len() as f64;
        let mut mean = Vec::with_capacity(x.len());
        let mut std_err = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            let m = values.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = if values.len() > 1 { values.iter().map(|v| (v[j] - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            mean.push(m);
            std_err.push((var / n).sqrt());
        }
        Self { kind, x, mean, std_err, method: String::new(), family: family.to_string(), seed }
    }

    pub fn with_method(mut self, method: &str) -> Self {
        self.method = method.to_string();
        self
    }

    /// Mean at index `x`, if present.
    pub fn at(&self, x: usize) -> Option<f64> {
        self.x.iter().position(|&v| v == x).map(|i| self.mean[i])
    }

    pub const CSV_HEADER: &'static str = "kind,x,mean,std_err,method,family,seed";

    pub fn write_csv_rows<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.x.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.kind.id(),
                self.x[i],
                self.mean[i],
                self.std_err[i],
                self.method,
                self.family,
                self.seed
            )?;
        }
        Ok(())
    }

    /// Parses rows written by [`MetricSeries::write_csv`]. Lines starting
    /// with `#` are skipped; consecutive rows sharing kind, method, family and
    /// seed form one series.
    pub fn read_csv(text: &str) -> std::result::Result<Vec<MetricSeries>, String> {
        let mut out: Vec<MetricSeries> = Vec::new();
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some(h) if h == Self::CSV_HEADER => {}
            other => return Err(format!("unexpected metric header {other:?}")),
        }
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(format!("expected 7 fields in {line:?}"));
            }
            let kind = MetricKind::from_id(f[0]).ok_or_else(|| format!("unknown metric kind {:?}", f[0]))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
            let x = f[1].parse::<usize>().map_err(|e| format!("{:?}: {e}", f[1]))?;
            let seed = f[6].parse::<u64>().map_err(|e| format!("{:?}: {e}", f[6]))?;
            let same = out.last().is_some_and(|s| s.kind == kind && s.method == f[4] && s.family == f[5] && s.seed == seed);
            if !same {
                out.push(MetricSeries {
                    kind,
                    x: Vec::new(),
                    mean: Vec::new(),
                    std_err: Vec::new(),
                    method: f[4].to_string(),
                    family: f[5].to_string(),
                    seed,
                });
            }
            let s = out.last_mut().expect("pushed above");
            s.x.push(x);
            s.mean.push(num(f[2])?);
            s.std_err.push(num(f[3])?);
        }
        Ok(out)
    }

    /// Header plus every series, in order.
    pub fn write_csv<W: Write>(series: &[MetricSeries], mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for s in series {
            s.write_csv_rows(&mut w)?;
        }
        Ok(())
    }
}

/// Evaluation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_envs")]
    pub num_test_envs: usize,
    /// Offline context lengths.
    pub horizons: Vec<usize>,
    /// Online episodes per grid environment.
    #[serde(default = "default_episodes")]
    pub online_episodes: usize,
    /// Online steps per bandit environment.
    #[serde(default = "default_steps")]
    pub online_steps: usize,
    /// Online context capacity; older transitions are evicted first.
    pub online_context_cap: usize,
}

fn default_envs() -> usize {
    200
}
fn default_episodes() -> usize {
    40
}
fn default_steps() -> usize {
    200
}

impl EvalConfig {
    pub fn new(horizons: Vec<usize>, online_context_cap: usize) -> Self {
        Self {
            num_test_envs: default_envs(),
            horizons,
            online_episodes: default_episodes(),
            online_steps: default_steps(),
            online_context_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.num_test_envs > 0
            && !self.horizons.is_empty()
            && self.horizons.iter().all(|&h| h > 0)
            && self.online_episodes > 0
            && self.online_steps > 0
            && self.online_context_cap > 0;
        if positive {
            Ok(())
        } else {
            Err(EvalError::InvalidConfig("all counts and horizons must be positive".into()))
        }
    }
}

/// The `i`-th test environment of `family` under `master_seed`. Bandit tasks
/// are drawn fresh; grid environments cycle through the test goals in order.
pub fn test_env(family: EnvFamily, i: usize, master_seed: u64) -> Result<EnvInstance> {
    let mut rng = RngStream::in_domain(master_seed, domain::EVAL_ENVS, i as u64);
    match family.default_grid() {
        None => Ok(sample_env(family.id(), Split::Test, &mut rng)?),
        Some(template) => {
            let split = GoalSplit::new(&template, master_seed);
            let goal = split.test[i % split.test.len()];
            let g = GridParams { goal, ..template };
            let task = if family == EnvFamily::DenseGrid { Task::DenseGrid(g) } else { Task::Darkroom(g) };
            Ok(EnvInstance::new(family, Split::Test, task))
        }
    }
}

fn check_shape(agent: &dyn Agent, family: EnvFamily) -> Result<()> {
    let spec = family.spec();
    let (sd, na) = agent.shape();
    if sd != spec.state_dim || na != spec.num_actions {
        return Err(EvalError::FamilyMismatch {
            family: family.id().to_string(),
            agent_state_dim: sd,
            agent_actions: na,
            state_dim: spec.state_dim,
            actions: spec.num_actions,
        });
    }
    Ok(())
}

fn suboptimality(means: &[f64], policy: &[f64]) -> f64 {
    let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    policy.iter().zip(means).map(|(p, m)| p * (best - m)).sum()
}

/// Offline evaluation with greedy decisions. Each test environment gets one
/// random-policy context of length `max(horizons)`; horizon `h` uses its
/// first `h` transitions, frozen.
///
/// Bandits record the expected suboptimality of the decision at the single
/// state. Grids run one greedy episode from the reset state, querying the
/// current state each step, and record its return.
pub fn eval_offline(agent: &dyn Agent, family: EnvFamily, config: &EvalConfig, master_seed: u64) -> Result<MetricSeries> {
    config.validate()?;
    check_shape(agent, family)?;
    let hmax = *config.horizons.iter().max().expect("validated");
    let mut envs = Vec::with_capacity(config.num_test_envs);
    let mut contexts = Vec::with_capacity(config.num_test_envs);
    for i in 0..config.num_test_envs {
        let mut env = test_env(family, i, master_seed)?;
        let mut rng = RngStream::in_domain(master_seed, domain::EVAL_CONTEXT, i as u64);
        contexts.push(collect_context(&mut env, &Policy::UniformRandom, hmax, &mut rng)?.transitions);
        envs.push(env);
    }
    let values = if family.is_bandit() {
        let mut values = Vec::with_capacity(envs.len());
        for (env, ctx) in envs.iter_mut().zip(&contexts) {
            let q = env.reset();
            let rows = agent.prefix_policies(Query { env, context: ctx, query: &q }, PredictMode::Greedy)?;
            let means = env.arm_means().expect("bandit");
            values.push(config.horizons.iter().map(|&h| suboptimality(means, &rows[h])).collect());
        }
        values
    } else {
        let mut values = vec![Vec::with_capacity(config.horizons.len()); envs.len()];
        for &h in &config.horizons {
            let prefixes: Vec<&[Transition]> = contexts.iter().map(|c| &c[..h]).collect();
            let returns = greedy_episodes(agent, &mut envs, &prefixes, master_seed)?;
            for (v, r) in values.iter_mut().zip(returns) {
                v.push(r);
            }
        }
        values
    };
    let kind = if family.is_bandit() { MetricKind::SuboptimalityVsHorizon } else { MetricKind::ReturnVsHorizon };
    Ok(MetricSeries::from_samples(kind, config.horizons.clone(), &values, family.id(), master_seed))
}

fn greedy_episodes(agent: &dyn Agent, envs: &mut [EnvInstance], contexts: &[&[Transition]], master_seed: u64) -> Result<Vec<f64>> {
    let mut states: Vec<StateVec> = envs.iter_mut().map(|e| e.reset()).collect();
    let mut returns = vec![0.0; envs.len()];
    let horizon = envs[0].spec().horizon;
    let mut rngs: Vec<RngStream> = (0..envs.len()).map(|i| RngStream::in_domain(master_seed, domain::EVAL_ACTIONS, i as u64)).collect();
    for _ in 0..horizon {
        let policies = {
            let qs: Vec<Query<'_>> =
                envs.iter().zip(contexts).zip(&states).map(|((env, context), query)| Query { env, context, query }).collect();
            agent.policies(&qs, PredictMode::Greedy)?
        };
        for (i, env) in envs.iter_mut().enumerate() {
            let a = ActionId(sample_categorical(&policies[i], &mut rngs[i]));
            let (r, next) = env.step(a, &mut rngs[i])?;
            returns[i] += r;
            states[i] = next;
        }
    }
    Ok(returns)
}

fn push_capped(ctx: &mut VecDeque<Transition>, t: Transition, cap: usize) {
    if ctx.len() == cap {
        ctx.pop_front();
    }
    ctx.push_back(t);
}

/// Online evaluation with sampled decisions and a self-collected context that
/// starts empty and evicts its oldest transition beyond
/// `online_context_cap`.
///
/// Bandits: cumulative pseudo-regret `sum_t (max m - m[a_t])` after each of
/// `online_steps` pulls. Grids: return of each of `online_episodes` episodes,
/// with the context carried across episodes.
pub fn eval_online(agent: &dyn Agent, family: EnvFamily, config: &EvalConfig, master_seed: u64) -> Result<MetricSeries> {
    config.validate()?;
    check_shape(agent, family)?;
    let n = config.num_test_envs;
    let mut envs: Vec<EnvInstance> = (0..n).map(|i| test_env(family, i, master_seed)).collect::<Result<_>>()?;
    let mut rngs: Vec<RngStream> = (0..n).map(|i| RngStream::in_domain(master_seed, domain::EVAL_ACTIONS, i as u64)).collect();
    let mut contexts: Vec<VecDeque<Transition>> = vec![VecDeque::with_capacity(config.online_context_cap); n];
    let cap = config.online_context_cap;

    let mut step_all = |envs: &mut [EnvInstance], states: &mut [StateVec], contexts: &mut [VecDeque<Transition>]| -> Result<Vec<ActionId>> {
        let flat: Vec<Vec<Transition>> = contexts.iter_mut().map(|c| c.make_contiguous().to_vec()).collect();
        let policies = {
            let qs: Vec<Query<'_>> =
                envs.iter().zip(&flat).zip(states.iter()).map(|((env, c), query)| Query { env, context: c, query }).collect();
            agent.policies(&qs, PredictMode::Sample)?
        };
        let mut actions = Vec::with_capacity(envs.len());
        for (i, env) in envs.iter_mut().enumerate() {
            let a = ActionId(sample_categorical(&policies[i], &mut rngs[i]));
            let (reward, next_state) = env.step(a, &mut rngs[i])?;
            let state = std::mem::replace(&mut states[i], next_state.clone());
            push_capped(&mut contexts[i], Transition { state, action: a, reward, next_state }, cap);
            actions.push(a);
        }
        Ok(actions)
    };

    if family.is_bandit() {
        let mut regret = vec![Vec::with_capacity(config.online_steps); n];
        let mut total = vec![0.0; n];
        for _ in 0..config.online_steps {
            let mut states: Vec<StateVec> = envs.iter_mut().map(|e| e.reset()).collect();
            let actions = step_all(&mut envs, &mut states, &mut contexts)?;
            for (i, a) in actions.iter().enumerate() {
                let means = envs[i].arm_means().expect("bandit");
                total[i] += suboptimality(means, &one_hot(means.len(), *a));
                regret[i].push(total[i]);
            }
        }
        let x = (1..=config.online_steps).collect();
        Ok(MetricSeries::from_samples(MetricKind::CumulativeRegretVsStep, x, &regret, family.id(), master_seed))
    } else {
        let horizon = envs[0].spec().horizon;
        let mut returns = vec![Vec::with_capacity(config.online_episodes); n];
        for _ in 0..config.online_episodes {
            let mut states: Vec<StateVec> = envs.iter_mut().map(|e| e.reset()).collect();
            let mut ep = vec![0.0; n];
            for _ in 0..horizon {
                step_all(&mut envs, &mut states, &mut contexts)?;
                for (i, c) in contexts.iter().enumerate() {
                    ep[i] += c.back().expect("just pushed").reward;
                }
            }
            for (r, e) in returns.iter_mut().zip(ep) {
                r.push(e);
            }
        }
        let x = (1..=config.online_episodes).collect();
        Ok(MetricSeries::from_samples(MetricKind::ReturnVsEpisode, x, &returns, family.id(), master_seed))
    }
}

/// Expected return of the uniform random policy over one episode, estimated
/// by simulation on the test environments.
pub fn random_policy_return(family: EnvFamily, num_envs: usize, episodes: usize, master_seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..num_envs {
        let mut env = test_env(family, i, master_seed)?;
        let mut rng = RngStream::in_domain(master_seed, domain::ORACLE, i as u64);
        for _ in 0..episodes {
            env.reset();
            for _ in 0..env.spec().horizon {
                let a = ActionId(rng.random_range(0..env.num_actions()));
                total += env.step(a, &mut rng)?.0;
            }
        }
    }
    Ok(total / (num_envs * episodes) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_statistics() {
        let s = MetricSeries::from_samples(MetricKind::ReturnVsEpisode, vec![1], &[vec![1.0], vec![3.0]], "darkroom", 0);
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.std_err[0] - 1.0).abs() < 1e-12);
        let one = MetricSeries::from_samples(MetricKind::ReturnVsEpisode, vec![1], &[vec![1.0]], "darkroom", 0);
        assert_eq!(one.std_err, vec![0.0]);
    }

    #[test]
    fn csv_columns() {
        let s = MetricSeries::from_samples(MetricKind::SuboptimalityVsHorizon, vec![1, 5], &[vec![0.5, 0.25]], "gaussian_bandit", 7)
            .with_method("SAD");
        let mut out = Vec::new();
        MetricSeries::write_csv(&[s], &mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "kind,x,mean,std_err,method,family,seed\n\
             suboptimality_vs_horizon,1,0.5,0,SAD,gaussian_bandit,7\n\
             suboptimality_vs_horizon,5,0.25,0,SAD,gaussian_bandit,7\n"
        );
    }
}
