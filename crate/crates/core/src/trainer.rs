//! Supervised pretraining: Adam on the weighted NLL of a generated dataset.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use sad_autodiff::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::model::{LabeledSequence, ModelConfig, ModelError, ModelParams};
use crate::rng::{domain, RngStream};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset has no samples")]
    EmptyDataset,
    #[error("dataset does not fit the model: {0}")]
    ShapeMismatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds both the parameter initialisation and the epoch shuffles.
    pub shuffle_seed: u64,
    /// Global gradient-norm bound; `0` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    64
}
fn default_clip() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn new(epochs: usize, shuffle_seed: u64) -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            batch_size: default_batch(),
            epochs,
            shuffle_seed,
            grad_clip: default_clip(),
        }
    }

    /// A zero learning rate is accepted so that a run can be replayed without
    /// moving the parameters.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad("eps must be positive and grad_clip non-negative");
        }
        Ok(())
    }
}

/// Loss curve and provenance of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub wall_time_secs: f64,
    pub checksum: String,
}

impl TrainReport {
    /// Two columns: `epoch,mean_loss`, epochs counted from 1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,mean_loss")?;
        for (i, l) in self.epoch_losses.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        Ok(())
    }
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new<T: Real>(params: &ModelParams<T>) -> Self {
        let zeros = || params.tensors.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    fn update<T: Real>(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, Tensor<T>>, scale: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (name, p) in params.tensors.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("moment per tensor");
            let v = self.v.get_mut(name).expect("moment per tensor");
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64() * scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let step = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                *w = T::from_f64(w.as_f64() - step);
            }
        }
    }
}

fn check_fit(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let spec = dataset.spec();
    if spec.state_dim != model.state_dim || spec.num_actions != model.num_actions {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset has state_dim {} and {} actions, model has {} and {}",
            spec.state_dim, spec.num_actions, model.state_dim, model.num_actions
        )));
    }
    if dataset.max_context_len() > model.max_context {
        return Err(TrainError::ShapeMismatch(format!(
            "dataset contexts reach {} transitions, model max_context is {}",
            dataset.max_context_len(),
            model.max_context
        )));
    }
    Ok(())
}

fn global_norm<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads.values().flat_map(|t| t.data().iter()).map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt()
}

/// Trains a freshly initialised model. See [`train_with`].
pub fn train<T: Real>(dataset: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<(ModelParams<T>, TrainReport)> {
    train_with(dataset, model, config, |_, _| {})
}

/// Trains a freshly initialised model, calling `on_epoch(epoch, mean_loss)`
/// after each pass. Each epoch is one seeded shuffle of the dataset split into
/// consecutive batches; the reported epoch loss is the sample-weighted mean of
/// the batch losses before each update.
pub fn train_with<T: Real, F: FnMut(usize, f64)>(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams<T>, TrainReport)> {
    config.validate()?;
    model.validate()?;
    check_fit(dataset, model)?;
    let start = Instant::now();
    let mut params = ModelParams::<T>::init(model, config.shuffle_seed)?;
    let items: Vec<LabeledSequence<'_>> = dataset.samples.iter().map(LabeledSequence::from).collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut adam = Adam::new(&params);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = RngStream::in_domain(config.shuffle_seed, domain::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<LabeledSequence<'_>> = chunk.iter().map(|&i| items[i]).collect();
            let (loss, grads) = params.loss_and_grad(&batch)?;
            total += loss * batch.len() as f64;
            let norm = global_norm(&grads);
            let scale = if config.grad_clip > 0.0 && norm > config.grad_clip { config.grad_clip / norm } else { 1.0 };
            adam.update(&mut params, &grads, scale, config);
        }
        let mean = total / items.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch + 1, mean);
    }
    let report = TrainReport { epoch_losses, wall_time_secs: start.elapsed().as_secs_f64(), checksum: params.checksum() };
    Ok((params, report))
}

/// Mean weighted NLL over the dataset, without updates.
pub fn evaluate_loss<T: Real>(params: &ModelParams<T>, dataset: &Dataset) -> Result<f64> {
    check_fit(dataset, &params.config)?;
    let items: Vec<LabeledSequence<'_>> = dataset.samples.iter().map(LabeledSequence::from).collect();
    let mut total = 0.0;
    for chunk in items.chunks(64) {
        total += params.batch_loss(chunk)? * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "shuffle_seed": 1}"#).unwrap();
        assert_eq!(c, TrainConfig::new(3, 1));
        assert_eq!((c.lr, c.batch_size, c.grad_clip), (1e-4, 64, 1.0));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "shuffle_seed": 1, "lr_decay": 1}"#).is_err());
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = TrainConfig::new(1, 0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(1, 0);
        c.lr = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let r = TrainReport { epoch_losses: vec![1.5, 0.25], wall_time_secs: 0.0, checksum: String::new() };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,mean_loss\n1,1.5\n2,0.25\n");
    }
}
