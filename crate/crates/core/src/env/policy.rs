use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionId, EnvError, EnvInstance, StateVec};

/// Behaviour policy used to collect contexts and run distillation rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    UniformRandom,
    /// `probs[state_index][action]`.
    Tabular { probs: Vec<Vec<f64>> },
}

impl Policy {
    pub fn validate(&self, env: &EnvInstance) -> Result<(), EnvError> {
        let Policy::Tabular { probs } = self else { return Ok(()) };
        if probs.len() != env.num_states() {
            return Err(EnvError::InvalidPolicy(format!(
                "{} rows for {} states",
                probs.len(),
                env.num_states()
            )));
        }
        for (s, row) in probs.iter().enumerate() {
            if row.len() != env.num_actions() || row.iter().any(|&p| p.is_nan() || p < 0.0) {
                return Err(EnvError::InvalidPolicy(format!("state {s}: bad row {row:?}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(EnvError::InvalidPolicy(format!("state {s}: probabilities sum to {total}")));
            }
        }
        Ok(())
    }

    pub fn action_probs(&self, env: &EnvInstance, s: &StateVec) -> Vec<f64> {
        match self {
            Policy::UniformRandom => vec![1.0 / env.num_actions() as f64; env.num_actions()],
            Policy::Tabular { probs } => {
                let idx = env.state_index(s).expect("policy queried at an invalid state");
                probs[idx].clone()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, env: &EnvInstance, s: &StateVec, rng: &mut R) -> ActionId {
        match self {
            Policy::UniformRandom => ActionId(rng.random_range(0..env.num_actions())),
            Policy::Tabular { probs } => {
                let idx = env.state_index(s).expect("policy queried at an invalid state");
                ActionId(sample_categorical(&probs[idx], rng))
            }
        }
    }
}

/// Inverse-CDF draw; falls back to the last positive entry on rounding.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
