//! Experiment configuration: one TOML document per experiment.

use std::path::{Path, PathBuf};

use sad_core::datagen::{DatagenConfig, Method};
use sad_core::env::{EnvFamily, EnvSpec, Policy};
use sad_core::eval::EvalConfig;
use sad_core::hash::config_hash;
use sad_core::model::ModelConfig;
use sad_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// Floating-point width used for training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Data-generation settings; the method lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub trust_horizon: usize,
    pub context_len: usize,
    pub dataset_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dit_temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_resamples: Option<usize>,
    /// Context-collection and rollout policy; uniform random when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
}

/// Transformer shape; state and action sizes come from the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "three")]
    pub n_layers: usize,
    #[serde(default = "three")]
    pub n_heads: usize,
    #[serde(default = "thirty_two")]
    pub d_embed: usize,
    /// Defaults to the dataset context length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_context: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_norm_eps: Option<f64>,
}

fn three() -> usize {
    3
}
fn thirty_two() -> usize {
    32
}
fn one() -> usize {
    1
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { n_layers: 3, n_heads: 3, d_embed: 32, max_context: None, layer_norm_eps: None }
    }
}

/// A full experiment: data generation, model, training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Pretraining family.
    pub family: String,
    /// Evaluation family; defaults to `family`. Must have the same shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_family: Option<String>,
    pub method: Method,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Independent runs; run `r` uses seed `master_seed + r` throughout.
    #[serde(default = "one")]
    pub runs: usize,
    #[serde(default)]
    pub precision: Precision,
    pub datagen: DatagenSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::ConfigInvalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// Hex SHA-256 of the configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the fields that determine datasets and trained weights. Eval
    /// settings, run count and output location are left out, so a trained
    /// run stays valid when only those change.
    pub fn training_hash(&self, run: usize) -> String {
        config_hash(&(
            &self.family,
            self.method,
            self.run_seed(run),
            self.precision,
            &self.datagen,
            &self.model,
            &self.train,
        ))
    }

    pub fn family_id(&self) -> Result<EnvFamily, HarnessError> {
        EnvFamily::from_id(&self.family).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))
    }

    pub fn eval_family_id(&self) -> Result<EnvFamily, HarnessError> {
        let id = self.eval_family.as_deref().unwrap_or(&self.family);
        EnvFamily::from_id(id).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))
    }

    pub fn spec(&self) -> Result<EnvSpec, HarnessError> {
        Ok(self.family_id()?.spec())
    }

    pub fn datagen_config(&self) -> DatagenConfig {
        let d = &self.datagen;
        let mut c = DatagenConfig::new(self.method, d.trust_horizon, d.context_len, d.dataset_size);
        if let Some(g) = d.gamma {
            c.gamma = g;
        }
        if let Some(t) = d.dit_temperature {
            c.dit_temperature = t;
        }
        if let Some(m) = d.max_resamples {
            c.max_resamples = m;
        }
        if let Some(p) = &d.policy {
            c.policy = p.clone();
        }
        c
    }

    pub fn model_config(&self) -> Result<ModelConfig, HarnessError> {
        let m = &self.model;
        let mut c = ModelConfig::standard(&self.spec()?, m.max_context.unwrap_or(self.datagen.context_len));
        c.n_layers = m.n_layers;
        c.n_heads = m.n_heads;
        c.d_embed = m.d_embed;
        if let Some(eps) = m.layer_norm_eps {
            c.layer_norm_eps = eps;
        }
        Ok(c)
    }

    /// Seed of run `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        self.master_seed.wrapping_add(r as u64)
    }

    /// Checks every section and the cross-field constraints.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::ConfigInvalid(m));
        let spec = self.spec()?;
        let eval_spec = self.eval_family_id()?.spec();
        if eval_spec.state_dim != spec.state_dim || eval_spec.num_actions != spec.num_actions {
            return invalid(format!("eval family {} has a different shape than {}", eval_spec.env_family, spec.env_family));
        }
        if self.runs == 0 {
            return invalid("runs must be at least 1".into());
        }
        self.datagen_config().validate(&spec).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        let model = self.model_config()?;
        model.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        if model.max_context < self.datagen.context_len {
            return invalid(format!("model max_context {} below context_len {}", model.max_context, self.datagen.context_len));
        }
        self.train.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        self.eval.validate().map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        if let Some(&h) = self.eval.horizons.iter().find(|&&h| h > model.max_context) {
            return invalid(format!("offline horizon {h} exceeds model max_context {}", model.max_context));
        }
        if self.eval.online_context_cap > model.max_context {
            return invalid(format!("online_context_cap {} exceeds model max_context {}", self.eval.online_context_cap, model.max_context));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
family = "darkroom"
method = "SAD"
master_seed = 1
output_dir = "out"

[datagen]
trust_horizon = 10
context_len = 49
dataset_size = 100

[train]
epochs = 1
shuffle_seed = 1

[eval]
horizons = [1, 49]
online_context_cap = 49
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(c.runs, 1);
        assert_eq!(c.precision, Precision::F32);
        assert_eq!(c.model, ModelSection::default());
        assert_eq!(c.model_config().unwrap().max_context, 49);
        assert_eq!(c.datagen_config().gamma, 0.99);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_fail() {
        let text = BASE.replace("[datagen]", "[datagen]\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(HarnessError::ConfigInvalid(_))));
        let text = format!("extra = true\n{BASE}");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn cross_field_checks() {
        let short = BASE.replace("[train]", "[model]\nmax_context = 20\n\n[train]");
        assert!(ExperimentConfig::from_toml(&short).is_err());
        let bandit_eval = BASE.replace("output_dir", "eval_family = \"gaussian_bandit\"\noutput_dir");
        assert!(ExperimentConfig::from_toml(&bandit_eval).is_err());
        let far = BASE.replace("horizons = [1, 49]", "horizons = [1, 80]");
        assert!(ExperimentConfig::from_toml(&far).is_err());
    }

    #[test]
    fn hash_follows_content() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.master_seed = 2;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.eval.num_test_envs = 7;
        c.output_dir = "elsewhere".into();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.training_hash(0), c.training_hash(0));
        assert_ne!(a.training_hash(0), a.training_hash(1));
    }
}
