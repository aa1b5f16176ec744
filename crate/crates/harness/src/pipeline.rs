//! The dataset → train → evaluate pipeline and the commands built on it.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! config.toml
//! run_<r>/dataset.jsonl
//! run_<r>/model/{model.bin,manifest.json}
//! run_<r>/train_loss.csv
//! run_<r>/{offline,online}_<eval family>.csv
//! {offline,online}_<eval family>.{csv,svg}
//! ```
//!
//! Every CSV starts with a `# config_hash=<hex>` line naming the generating
//! configuration.

use std::fs;
use std::path::{Path, PathBuf};

use sad_autodiff::Real;
use sad_core::datagen::{build_dataset, Dataset};
use sad_core::env::Split;
use sad_core::eval::{eval_offline, eval_online, Agent, MetricKind, MetricSeries, ModelAgent, UniformAgent};
use sad_core::hash::config_hash;
use sad_core::model::{Manifest, ModelParams};
use sad_core::trainer::{train, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::improvement::{Direction, ImprovementTable};
use crate::plot::{line_chart, Curve};
use crate::{HarnessError, Result};

/// Offline or online deployment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Offline,
    Online,
}

impl Setting {
    pub fn id(self) -> &'static str {
        match self {
            Setting::Offline => "offline",
            Setting::Online => "online",
        }
    }
}

/// Ablation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TrustHorizon,
    NHeads,
    NLayers,
}

impl AblationAxis {
    pub fn id(self) -> &'static str {
        match self {
            AblationAxis::TrustHorizon => "trust_horizon",
            AblationAxis::NHeads => "n_heads",
            AblationAxis::NLayers => "n_layers",
        }
    }

    pub fn from_id(s: &str) -> Option<Self> {
        [AblationAxis::TrustHorizon, AblationAxis::NHeads, AblationAxis::NLayers].into_iter().find(|a| a.id() == s)
    }

    /// `config` with this axis set to `value`.
    pub fn apply(self, config: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = config.clone();
        match self {
            AblationAxis::TrustHorizon => c.datagen.trust_horizon = value,
            AblationAxis::NHeads => c.model.n_heads = value,
            AblationAxis::NLayers => c.model.n_layers = value,
        }
        c
    }
}

pub fn run_dir(config: &ExperimentConfig, run: usize) -> PathBuf {
    config.output_dir.join(format!("run_{run}"))
}

pub fn dataset_path(config: &ExperimentConfig, run: usize) -> PathBuf {
    run_dir(config, run).join("dataset.jsonl")
}

pub fn model_dir(config: &ExperimentConfig, run: usize) -> PathBuf {
    run_dir(config, run).join("model")
}

/// Per-run metric file for the configured evaluation family.
pub fn run_metrics_path(config: &ExperimentConfig, run: usize, setting: Setting) -> PathBuf {
    run_dir(config, run).join(metrics_file_name(config, setting, "csv"))
}

/// Aggregated metric file for the configured evaluation family.
pub fn metrics_path(config: &ExperimentConfig, setting: Setting) -> PathBuf {
    config.output_dir.join(metrics_file_name(config, setting, "csv"))
}

fn metrics_file_name(config: &ExperimentConfig, setting: Setting, ext: &str) -> String {
    let family = config.eval_family.as_deref().unwrap_or(&config.family);
    format!("{}_{family}.{ext}", setting.id())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingArtifact(path.to_path_buf()))
    }
}

/// Writes `text` after a provenance line.
fn write_with_hash(path: &Path, hash: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut buf = format!("# config_hash={hash}\n").into_bytes();
    body(&mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// The hash recorded in the first line of a harness CSV, if any.
pub fn read_hash_line(path: &Path) -> Result<Option<String>> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    Ok(text.lines().next().and_then(|l| l.strip_prefix("# config_hash=")).map(str::to_string))
}

/// Writes the configuration next to its outputs.
fn save_config(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir)?;
    fs::write(config.output_dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

/// Generates the dataset of one run.
pub fn generate_run(config: &ExperimentConfig, run: usize) -> Result<PathBuf> {
    let ds = build_dataset(&config.family, Split::Train, &config.datagen_config(), config.run_seed(run))?;
    let path = dataset_path(config, run);
    fs::create_dir_all(run_dir(config, run))?;
    ds.save(&path)?;
    Ok(path)
}

/// `generate`: one dataset file per run.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    save_config(config)?;
    (0..config.runs).map(|r| generate_run(config, r)).collect()
}

fn train_typed<T: Real>(config: &ExperimentConfig, run: usize, ds: &Dataset) -> Result<TrainReport> {
    let mut tc = config.train.clone();
    tc.shuffle_seed = tc.shuffle_seed.wrapping_add(run as u64);
    let (params, report) = train::<T>(ds, &config.model_config()?, &tc)?;
    let meta = serde_json::json!({
        "config_hash": config.hash(),
        "training_hash": config.training_hash(run),
        "run": run,
        "epoch_losses": report.epoch_losses,
    });
    params.save(&model_dir(config, run), meta)?;
    Ok(report)
}

/// Trains one run from its dataset file.
pub fn train_run(config: &ExperimentConfig, run: usize) -> Result<TrainReport> {
    let path = dataset_path(config, run);
    require(&path)?;
    let ds = Dataset::load(&path)?;
    let report = match config.precision {
        Precision::F32 => train_typed::<f32>(config, run, &ds)?,
        Precision::F64 => train_typed::<f64>(config, run, &ds)?,
    };
    write_with_hash(&run_dir(config, run).join("train_loss.csv"), &config.hash(), |w| report.write_csv(w))?;
    Ok(report)
}

/// `train`: one checkpoint per run; requires the datasets.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Vec<TrainReport>> {
    save_config(config)?;
    (0..config.runs).map(|r| train_run(config, r)).collect()
}

/// Whether run `run` already has a checkpoint trained from this configuration.
pub fn is_trained(config: &ExperimentConfig, run: usize) -> bool {
    let path = model_dir(config, run).join("manifest.json");
    let Ok(text) = fs::read_to_string(path) else { return false };
    let Ok(m) = serde_json::from_str::<Manifest>(&text) else { return false };
    m.metadata.get("training_hash").and_then(|v| v.as_str()) == Some(config.training_hash(run).as_str())
}

/// Generates and trains every run that lacks a matching checkpoint.
pub fn ensure_trained(config: &ExperimentConfig) -> Result<()> {
    save_config(config)?;
    for r in 0..config.runs {
        if !is_trained(config, r) {
            generate_run(config, r)?;
            train_run(config, r)?;
        }
    }
    Ok(())
}

/// Training losses stored in the checkpoint of run `run`.
pub fn stored_losses(config: &ExperimentConfig, run: usize) -> Result<Vec<f64>> {
    let path = model_dir(config, run).join("manifest.json");
    require(&path)?;
    let m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| HarnessError::Malformed { path: path.clone(), reason: e.to_string() })?;
    serde_json::from_value(m.metadata["epoch_losses"].clone()).map_err(|e| HarnessError::Malformed { path, reason: e.to_string() })
}

fn evaluate(agent: &dyn Agent, config: &ExperimentConfig, setting: Setting, seed: u64) -> Result<MetricSeries> {
    let family = config.eval_family_id()?;
    Ok(match setting {
        Setting::Offline => eval_offline(agent, family, &config.eval, seed)?,
        Setting::Online => eval_online(agent, family, &config.eval, seed)?,
    })
}

fn eval_typed<T: Real>(config: &ExperimentConfig, run: usize, setting: Setting) -> Result<MetricSeries> {
    let dir = model_dir(config, run);
    require(&dir.join("manifest.json"))?;
    let (params, _) = ModelParams::<T>::load(&dir)?;
    let series = evaluate(&ModelAgent { params: &params }, config, setting, config.run_seed(run))?;
    Ok(series.with_method(config.method.id()))
}

/// Evaluates the checkpoint of one run and writes its metric file.
pub fn eval_run(config: &ExperimentConfig, run: usize, setting: Setting) -> Result<MetricSeries> {
    let series = match config.precision {
        Precision::F32 => eval_typed::<f32>(config, run, setting)?,
        Precision::F64 => eval_typed::<f64>(config, run, setting)?,
    };
    write_with_hash(&run_metrics_path(config, run, setting), &config.hash(), |w| MetricSeries::write_csv(std::slice::from_ref(&series), w))?;
    Ok(series)
}

/// Mean over runs of per-run curves. The error band is the standard error
/// across runs, or the across-environment error for a single run.
pub fn aggregate(series: &[MetricSeries], seed: u64) -> MetricSeries {
    let first = &series[0];
    if series.len() == 1 {
        return MetricSeries { seed, ..first.clone() };
    }
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(first.x.len());
    let mut std_err = Vec::with_capacity(first.x.len());
    for j in 0..first.x.len() {
        let m = series.iter().map(|s| s.mean[j]).sum::<f64>() / n;
        let var = series.iter().map(|s| (s.mean[j] - m).powi(2)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        std_err.push((var / n).sqrt());
    }
    MetricSeries { mean, std_err, seed, ..first.clone() }
}

/// The uniform-random reference curve, averaged over the same runs.
fn uniform_reference(config: &ExperimentConfig, setting: Setting) -> Result<MetricSeries> {
    let agent = UniformAgent::for_family(config.eval_family_id()?);
    let per_run = (0..config.runs)
        .map(|r| evaluate(&agent, config, setting, config.run_seed(r)).map(|s| s.with_method("uniform")))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&per_run, config.master_seed))
}

/// `eval-offline` / `eval-online`: per-run metrics, the run average with a
/// uniform-random reference curve, and a plot.
pub fn cmd_eval(config: &ExperimentConfig, setting: Setting) -> Result<Vec<MetricSeries>> {
    save_config(config)?;
    let per_run = (0..config.runs).map(|r| eval_run(config, r, setting)).collect::<Result<Vec<_>>>()?;
    let series = vec![aggregate(&per_run, config.master_seed), uniform_reference(config, setting)?];
    write_with_hash(&metrics_path(config, setting), &config.hash(), |w| MetricSeries::write_csv(&series, w))?;
    let svg = config.output_dir.join(metrics_file_name(config, setting, "svg"));
    let title = format!("{} {} ({})", config.method, setting.id(), series[0].family);
    fs::write(svg, chart(&title, &series))?;
    Ok(series)
}

fn axis_labels(kind: MetricKind) -> (&'static str, &'static str) {
    match kind {
        MetricKind::SuboptimalityVsHorizon => ("context length", "suboptimality"),
        MetricKind::ReturnVsHorizon => ("context length", "return"),
        MetricKind::CumulativeRegretVsStep => ("step", "cumulative regret"),
        MetricKind::ReturnVsEpisode => ("episode", "return"),
    }
}

fn chart(title: &str, series: &[MetricSeries]) -> String {
    let (xl, yl) = axis_labels(series[0].kind);
    let curves: Vec<Curve> = series
        .iter()
        .map(|s| Curve {
            label: s.method.clone(),
            points: s.x.iter().zip(&s.mean).zip(&s.std_err).map(|((&x, &m), &e)| (x as f64, m, e)).collect(),
        })
        .collect();
    line_chart(title, xl, yl, &curves)
}

/// `ablate`: the full pipeline for each value of `axis`, each in its own
/// subdirectory, with the stacked offline curves written next to `config`.
pub fn cmd_ablate(config: &ExperimentConfig, axis: AblationAxis, values: &[usize]) -> Result<Vec<MetricSeries>> {
    if values.is_empty() {
        return Err(HarnessError::ConfigInvalid("ablation needs at least one value".into()));
    }
    let mut stacked = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = axis.apply(config, v);
        c.output_dir = config.output_dir.join(format!("ablate_{}_{v}", axis.id()));
        c.validate()?;
        ensure_trained(&c)?;
        let series = cmd_eval(&c, Setting::Offline)?;
        stacked.push(series[0].clone().with_method(&format!("{} {}={v}", config.method, axis.id())));
    }
    let hash = config_hash(&(config.hash(), axis, values));
    let base = config.output_dir.join(format!("ablate_{}", axis.id()));
    write_with_hash(&base.with_extension("csv"), &hash, |w| MetricSeries::write_csv(&stacked, w))?;
    fs::write(base.with_extension("svg"), chart(&format!("{} ablation", axis.id()), &stacked))?;
    Ok(stacked)
}

/// Reads an aggregated metric file and returns the curve of `method`.
pub fn load_series(path: &Path, method: &str) -> Result<MetricSeries> {
    require(path)?;
    let text = fs::read_to_string(path)?;
    let all = MetricSeries::read_csv(&text).map_err(|reason| HarnessError::Malformed { path: path.to_path_buf(), reason })?;
    all.into_iter()
        .find(|s| s.method == method)
        .ok_or_else(|| HarnessError::Malformed { path: path.to_path_buf(), reason: format!("no series for {method}") })
}

/// Scalar summary of a curve: the value at the last x, or for returns per
/// episode the mean over the last (up to) 10 episodes.
pub fn summary_value(series: &MetricSeries) -> f64 {
    match series.kind {
        MetricKind::ReturnVsEpisode => {
            let k = series.mean.len().min(10);
            series.mean[series.mean.len() - k..].iter().sum::<f64>() / k as f64
        }
        _ => *series.mean.last().expect("non-empty series"),
    }
}

fn direction(kind: MetricKind) -> Direction {
    if kind.lower_is_better() {
        Direction::LowerIsBetter
    } else {
        Direction::HigherIsBetter
    }
}

/// `compare`: relative improvement of the first configuration's method over
/// every other, offline and online, from already-evaluated outputs.
pub fn cmd_compare(configs: &[ExperimentConfig], out: &Path) -> Result<ImprovementTable> {
    let Some((ours, baselines)) = configs.split_first() else {
        return Err(HarnessError::ConfigInvalid("compare needs at least two configurations".into()));
    };
    if baselines.is_empty() {
        return Err(HarnessError::ConfigInvalid("compare needs at least two configurations".into()));
    }
    let mut table = ImprovementTable::default();
    for setting in [Setting::Offline, Setting::Online] {
        let mine = load_series(&metrics_path(ours, setting), ours.method.id())?;
        for b in baselines {
            let theirs = load_series(&metrics_path(b, setting), b.method.id())?;
            if theirs.kind != mine.kind || theirs.family != mine.family {
                return Err(HarnessError::ConfigInvalid(format!(
                    "cannot compare {} on {} with {} on {}",
                    mine.kind.id(),
                    mine.family,
                    theirs.kind.id(),
                    theirs.family
                )));
            }
            table.push(
                &mine.family,
                ours.method.id(),
                b.method.id(),
                setting.id(),
                mine.kind.id(),
                direction(mine.kind),
                summary_value(&mine),
                summary_value(&theirs),
            )?;
        }
    }
    let hashes: Vec<String> = configs.iter().map(ExperimentConfig::hash).collect();
    fs::create_dir_all(out)?;
    table.write_csv(fs::File::create(out.join("improvement.csv"))?, &config_hash(&hashes))?;
    Ok(table)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| HarnessError::ConfigInvalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
