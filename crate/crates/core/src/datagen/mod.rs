//! Pretraining dataset generation.
//!
//! State-action distillation (SAD) labels each query state by rolling out the
//! behaviour policy after every candidate first action and keeping the action
//! that does best within the trust horizon `N`:
//!
//! * dense rewards: highest discounted return over `N + 1` steps;
//! * sparse rewards: fewest steps to the first reward, accepted only when some
//!   action succeeds in fewer than `N` steps;
//! * bandits: highest empirical mean once every arm has more than `N` pulls.
//!
//! The AD, DPT (random-label) and DIT generators build the baseline datasets
//! from the same behaviour policy.

mod dataset;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dataset::{Context, Dataset, DatasetHeader, PretrainSample};

use crate::env::{sample_env, ActionId, EnvError, EnvFamily, EnvInstance, EnvSpec, Policy, RewardKind, Split, StateVec, Transition};
use crate::hash::config_hash;
use crate::rng::{domain, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid trust horizon {n}: {reason}")]
    InvalidTrustHorizon { n: usize, reason: String },
    #[error("no query state was accepted after {0} resamples")]
    NonTermination(usize),
    #[error("method {method} cannot run on this environment: {reason}")]
    MethodEnvMismatch { method: Method, reason: String },
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("dataset format: {0}")]
    Format(String),
}

type Result<T, E = DatagenError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SAD")]
    Sad,
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "DPT_random")]
    DptRandom,
    #[serde(rename = "DIT")]
    Dit,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sad, Method::Ad, Method::DptRandom, Method::Dit];

    pub fn id(self) -> &'static str {
        match self {
            Method::Sad => "SAD",
            Method::Ad => "AD",
            Method::DptRandom => "DPT_random",
            Method::Dit => "DIT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL.into_iter().find(|m| m.id() == s).ok_or_else(|| format!("unknown method {s:?}"))
    }
}

fn default_gamma() -> f64 {
    0.99
}

fn default_temperature() -> f64 {
    0.3
}

fn default_max_resamples() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenConfig {
    pub method: Method,
    /// Trust horizon `N`.
    pub trust_horizon: usize,
    /// Context length `T`.
    pub context_len: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub dataset_size: usize,
    /// Softmax temperature of the DIT return weights.
    #[serde(default = "default_temperature")]
    pub dit_temperature: f64,
    #[serde(default)]
    pub policy: Policy,
    /// Query resamples allowed per sparse sample before giving up.
    #[serde(default = "default_max_resamples")]
    pub max_resamples: usize,
}

impl DatagenConfig {
    pub fn new(method: Method, trust_horizon: usize, context_len: usize, dataset_size: usize) -> Self {
        Self {
            method,
            trust_horizon,
            context_len,
            gamma: default_gamma(),
            dataset_size,
            dit_temperature: default_temperature(),
            policy: Policy::UniformRandom,
            max_resamples: default_max_resamples(),
        }
    }

    pub fn validate(&self, spec: &EnvSpec) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DatagenError::InvalidConfig(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.dit_temperature.is_nan() || self.dit_temperature <= 0.0 {
            return Err(DatagenError::InvalidConfig(format!("temperature {} must be positive", self.dit_temperature)));
        }
        let mismatch = |reason: &str| DatagenError::MethodEnvMismatch { method: self.method, reason: reason.into() };
        match self.method {
            Method::Sad => check_trust_horizon(spec, self.trust_horizon, spec.horizon)?,
            Method::DptRandom => {}
            Method::Ad => {
                if self.context_len == 0 {
                    return Err(mismatch("histories need a positive context length"));
                }
                if spec.horizon == 0 {
                    return Err(mismatch("episodes have zero length"));
                }
            }
            Method::Dit => {
                if self.context_len == 0 || spec.horizon == 0 {
                    return Err(mismatch("episodes need a positive length"));
                }
                if spec.reward_kind != RewardKind::Bandit && self.context_len < spec.horizon {
                    return Err(mismatch("the context cannot hold one full episode"));
                }
            }
        }
        Ok(())
    }
}

fn check_trust_horizon(spec: &EnvSpec, n: usize, t: usize) -> Result<()> {
    let bad = |reason: &str| Err(DatagenError::InvalidTrustHorizon { n, reason: reason.into() });
    match spec.reward_kind {
        RewardKind::Sparse if n < 2 => bad("sparse distillation needs N >= 2"),
        RewardKind::Sparse | RewardKind::Dense if n > t => bad("N exceeds the rollout horizon"),
        RewardKind::Bandit if n == 0 => bad("bandit distillation needs N >= 1"),
        _ => Ok(()),
    }
}

/// Transitions from uniformly sampled states, each with one action drawn from
/// `policy` and executed from that state.
pub fn collect_context<R: Rng + ?Sized>(
    env: &mut EnvInstance,
    policy: &Policy,
    t: usize,
    rng: &mut R,
) -> Result<Context> {
    let mut transitions = Vec::with_capacity(t);
    for _ in 0..t {
        let state = env.sample_state_uniform(rng);
        let action = policy.sample(env, &state, rng);
        env.reset_to(&state)?;
        let (reward, next_state) = env.step(action, rng)?;
        transitions.push(Transition { state, action, reward, next_state });
    }
    Ok(context_from(transitions))
}

fn context_from(transitions: Vec<Transition>) -> Context {
    Context { transitions }
}

fn require_kind(env: &EnvInstance, kind: RewardKind) -> Result<()> {
    if env.spec().reward_kind != kind {
        return Err(DatagenError::MethodEnvMismatch {
            method: Method::Sad,
            reason: format!("expected {kind:?} rewards, found {:?}", env.spec().reward_kind),
        });
    }
    Ok(())
}

/// Dense-reward distillation: for each first action, one rollout of `N + 1`
/// steps (capped at the episode horizon), scored by its discounted return.
pub fn distill_dense<R: Rng + ?Sized>(
    env: &mut EnvInstance,
    policy: &Policy,
    n: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<(StateVec, ActionId)> {
    require_kind(env, RewardKind::Dense)?;
    let horizon = env.spec().horizon;
    check_trust_horizon(env.spec(), n, horizon)?;
    let query = env.sample_state_uniform(rng);
    let steps = (n + 1).min(horizon);
    let mut best = (f64::NEG_INFINITY, 0);
    for a in 0..env.num_actions() {
        env.reset_to(&query)?;
        let mut action = ActionId(a);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..steps {
            let (r, s) = env.step(action, rng)?;
            ret += discount * r;
            discount *= gamma;
            action = policy.sample(env, &s, rng);
        }
        if ret > best.0 {
            best = (ret, a);
        }
    }
    Ok((query, ActionId(best.1)))
}

/// Sparse-reward distillation. Resamples query states until some first
/// action reaches a reward in fewer than `N` steps, then returns the query,
/// the fastest action, and its step count.
///
/// Rollouts stop after `N - 1` steps: an action that has not been rewarded
/// by then can neither pass the acceptance test nor win the argmin, so it is
/// recorded as a failure (`T`).
pub fn distill_sparse<R: Rng + ?Sized>(
    env: &mut EnvInstance,
    policy: &Policy,
    n: usize,
    t: usize,
    max_resamples: usize,
    rng: &mut R,
) -> Result<(StateVec, ActionId, usize)> {
    require_kind(env, RewardKind::Sparse)?;
    check_trust_horizon(env.spec(), n, t)?;
    if t > env.spec().horizon {
        return Err(DatagenError::InvalidTrustHorizon { n, reason: format!("rollout cap {t} exceeds the horizon") });
    }
    let cap = (n - 1).min(t);
    for _ in 0..max_resamples {
        let query = env.sample_state_uniform(rng);
        let mut best = (t, 0);
        for a in 0..env.num_actions() {
            env.reset_to(&query)?;
            let mut action = ActionId(a);
            for k in 1..=cap {
                let (r, s) = env.step(action, rng)?;
                if r > 0.0 {
                    if k < best.0 {
                        best = (k, a);
                    }
                    break;
                }
                action = policy.sample(env, &s, rng);
            }
        }
        if best.0 < n {
            return Ok((query, ActionId(best.1), best.0));
        }
    }
    Err(DatagenError::NonTermination(max_resamples))
}

/// Bandit distillation: pull arms under `policy` until every arm has been
/// pulled more than `N` times, then pick the best empirical mean.
pub fn distill_bandit<R: Rng + ?Sized>(
    env: &mut EnvInstance,
    policy: &Policy,
    n: usize,
    rng: &mut R,
) -> Result<(StateVec, ActionId)> {
    require_kind(env, RewardKind::Bandit)?;
    check_trust_horizon(env.spec(), n, usize::MAX)?;
    let state = env.reset();
    let k = env.num_actions();
    if policy.action_probs(env, &state).iter().any(|&p| p <= 0.0) {
        return Err(EnvError::InvalidPolicy("every arm needs positive probability".into()).into());
    }
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    let mut unfinished = k;
    while unfinished > 0 {
        let a = policy.sample(env, &state, rng);
        let (r, _) = env.step(a, rng)?;
        counts[a.0] += 1;
        sums[a.0] += r;
        if counts[a.0] == n + 1 {
            unfinished -= 1;
        }
    }
    let mut best = 0;
    for a in 1..k {
        if sums[a] / counts[a] as f64 > sums[best] / counts[best] as f64 {
            best = a;
        }
    }
    Ok((state, ActionId(best)))
}

/// DIT sample weights: softmax of the returns-to-go divided by `alpha`.
pub fn dit_weights(returns: &[f64], alpha: f64) -> Vec<f64> {
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = returns.iter().map(|r| ((r - max) / alpha).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Discounted returns-to-go `R_t = sum_{u >= t} gamma^(u - t) r_u`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// `len` transitions of consecutive episodes from the initial state.
pub fn episodic_history<R: Rng + ?Sized>(
    env: &mut EnvInstance,
    policy: &Policy,
    len: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    let horizon = env.spec().horizon;
    if horizon == 0 && len > 0 {
        return Err(EnvError::Unsupported("episodes of zero length").into());
    }
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let mut state = env.reset();
        for _ in 0..horizon.min(len - out.len()) {
            let action = policy.sample(env, &state, rng);
            let (reward, next_state) = env.step(action, rng)?;
            out.push(Transition { state, action, reward, next_state: next_state.clone() });
            state = next_state;
        }
    }
    Ok(out)
}

struct Job<'a> {
    family: &'a str,
    split: Split,
    config: &'a DatagenConfig,
    master_seed: u64,
}

impl Job<'_> {
    fn stream(&self, i: u64) -> RngStream {
        RngStream::in_domain(self.master_seed, domain::DATASET, i)
    }

    fn sample(&self, env: &EnvInstance, context: Context, query: StateVec, label: ActionId, weight: f64, i: u64) -> PretrainSample {
        PretrainSample {
            context,
            query_state: query,
            action_label: label,
            weight,
            env_tag: env.tag(),
            method: self.config.method,
            seed: i,
        }
    }

    /// SAD and DPT_random: one sample per stream.
    fn single(&self, i: u64) -> Result<PretrainSample> {
        let cfg = self.config;
        let mut rng = self.stream(i);
        let mut env = sample_env(self.family, self.split, &mut rng)?;
        let context = collect_context(&mut env, &cfg.policy, cfg.context_len, &mut rng)?;
        let (query, label) = match (cfg.method, env.spec().reward_kind) {
            (Method::DptRandom, _) => {
                let q = env.sample_state_uniform(&mut rng);
                let a = cfg.policy.sample(&env, &q, &mut rng);
                (q, a)
            }
            (_, RewardKind::Dense) => distill_dense(&mut env, &cfg.policy, cfg.trust_horizon, cfg.gamma, &mut rng)?,
            (_, RewardKind::Sparse) => {
                let t = env.spec().horizon;
                let (q, a, _) = distill_sparse(&mut env, &cfg.policy, cfg.trust_horizon, t, cfg.max_resamples, &mut rng)?;
                (q, a)
            }
            (_, RewardKind::Bandit) => distill_bandit(&mut env, &cfg.policy, cfg.trust_horizon, &mut rng)?,
        };
        env.reset();
        Ok(self.sample(&env, context, query, label, 1.0, i))
    }

    /// AD: every step of one history becomes a sample whose context is the
    /// history before that step.
    fn ad_history(&self, j: u64) -> Result<Vec<PretrainSample>> {
        let mut rng = self.stream(j);
        let mut env = sample_env(self.family, self.split, &mut rng)?;
        let history = episodic_history(&mut env, &self.config.policy, self.config.context_len, &mut rng)?;
        env.reset();
        Ok((0..history.len())
            .map(|t| {
                let tr = &history[t];
                self.sample(&env, context_from(history[..t].to_vec()), tr.state.clone(), tr.action, 1.0, j)
            })
            .collect())
    }

    /// DIT: one episode as context; each of its steps is a sample weighted by
    /// its return-to-go. Bandit pulls are one-step episodes, so their return
    /// is the pull's reward.
    fn dit_episode(&self, j: u64) -> Result<Vec<PretrainSample>> {
        let cfg = self.config;
        let mut rng = self.stream(j);
        let mut env = sample_env(self.family, self.split, &mut rng)?;
        let bandit = env.spec().reward_kind == RewardKind::Bandit;
        let len = if bandit { cfg.context_len } else { env.spec().horizon };
        let episode = episodic_history(&mut env, &cfg.policy, len, &mut rng)?;
        env.reset();
        let rewards: Vec<f64> = episode.iter().map(|t| t.reward).collect();
        let returns = if bandit { rewards } else { returns_to_go(&rewards, cfg.gamma) };
        let weights = dit_weights(&returns, cfg.dit_temperature);
        let context = context_from(episode);
        Ok(context
            .transitions
            .iter()
            .zip(weights)
            .map(|(tr, w)| self.sample(&env, context.clone(), tr.state.clone(), tr.action, w, j))
            .collect())
    }

    fn samples_per_history(&self, spec: &EnvSpec) -> usize {
        match self.config.method {
            Method::Dit if spec.reward_kind != RewardKind::Bandit => spec.horizon,
            _ => self.config.context_len,
        }
    }
}

/// Builds `config.dataset_size` samples for `family`. Sample (or history) `i`
/// draws only from stream `(master_seed, i)`, so the output does not depend
/// on the number of worker threads.
pub fn build_dataset(family: &str, split: Split, config: &DatagenConfig, master_seed: u64) -> Result<Dataset> {
    let spec = EnvFamily::from_id(family)?.spec();
    config.validate(&spec)?;
    let job = Job { family, split, config, master_seed };
    let size = config.dataset_size;
    let samples = match config.method {
        Method::Sad | Method::DptRandom => {
            (0..size as u64).into_par_iter().map(|i| job.single(i)).collect::<Result<Vec<_>>>()?
        }
        Method::Ad | Method::Dit => {
            let histories = size.div_ceil(job.samples_per_history(&spec));
            let groups = (0..histories as u64)
                .into_par_iter()
                .map(|j| if config.method == Method::Ad { job.ad_history(j) } else { job.dit_episode(j) })
                .collect::<Result<Vec<_>>>()?;
            let mut samples: Vec<_> = groups.into_iter().flatten().collect();
            samples.truncate(size);
            samples
        }
    };
    let header = DatasetHeader {
        family: family.to_string(),
        split,
        master_seed,
        config: config.clone(),
        env_spec: spec,
        config_hash: config_hash(&(family, split, config, master_seed)),
    };
    Ok(Dataset { header, samples })
}

/// Baseline datasets (AD, DPT_random, DIT) from the same behaviour policy.
pub fn build_baseline_dataset(
    method: Method,
    family: &str,
    split: Split,
    config: &DatagenConfig,
    master_seed: u64,
) -> Result<Dataset> {
    if method == Method::Sad {
        return Err(DatagenError::InvalidConfig("SAD is not a baseline method".into()));
    }
    build_dataset(family, split, &DatagenConfig { method, ..config.clone() }, master_seed)
}
