//! `sad`: generate datasets, train, evaluate, ablate and compare.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sad_harness::pipeline::{cmd_ablate, cmd_compare, cmd_eval, cmd_generate, cmd_train, with_threads, AblationAxis, Setting};
use sad_harness::{ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "sad", version, about = "In-context RL pretraining experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long, required = true)]
    config: Vec<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for dataset generation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Deterministic single-threaded execution.
    #[arg(long)]
    reference_path: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build the pretraining dataset of every run.
    Generate(Common),
    /// Train one model per run from the generated datasets.
    Train(Common),
    /// Evaluate with frozen pre-collected contexts.
    EvalOffline(Common),
    /// Evaluate with self-collected contexts.
    EvalOnline(Common),
    /// Rerun the pipeline over values of one axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// trust_horizon, n_heads or n_layers.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
    },
    /// Improvement of the first configuration's method over the others.
    Compare(Common),
}

impl Common {
    fn load(&self) -> Result<Vec<ExperimentConfig>> {
        self.config
            .iter()
            .map(|p| {
                let mut c = ExperimentConfig::load(p)?;
                if let Some(s) = self.seed {
                    c.master_seed = s;
                }
                c.validate()?;
                Ok(c)
            })
            .collect()
    }

    /// The single configuration of a non-compare verb, with `--out` applied.
    fn single(&self) -> Result<ExperimentConfig> {
        let mut all = self.load()?;
        if all.len() != 1 {
            return Err(HarnessError::ConfigInvalid("this command takes exactly one --config".into()));
        }
        let mut c = all.remove(0);
        if let Some(out) = &self.out {
            c.output_dir = out.clone();
        }
        Ok(c)
    }

    fn threads(&self) -> usize {
        if self.reference_path {
            1
        } else {
            self.threads
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = c.single()?;
            for p in with_threads(c.threads(), || cmd_generate(&cfg))?? {
                println!("{}", p.display());
            }
        }
        Command::Train(c) => {
            let cfg = c.single()?;
            for (r, report) in with_threads(c.threads(), || cmd_train(&cfg))??.iter().enumerate() {
                println!("run {r}: final loss {:.4}", report.epoch_losses.last().copied().unwrap_or(f64::NAN));
            }
        }
        Command::EvalOffline(c) => eval(&c, Setting::Offline)?,
        Command::EvalOnline(c) => eval(&c, Setting::Online)?,
        Command::Ablate { common, axis, values } => {
            let cfg = common.single()?;
            let axis = AblationAxis::from_id(&axis).ok_or_else(|| HarnessError::ConfigInvalid(format!("unknown ablation axis {axis:?}")))?;
            for s in with_threads(common.threads(), || cmd_ablate(&cfg, axis, &values))?? {
                println!("{}: {:?}", s.method, s.mean);
            }
        }
        Command::Compare(c) => {
            let cfgs = c.load()?;
            let out = c.out.clone().unwrap_or_else(|| cfgs[0].output_dir.clone());
            let table = cmd_compare(&cfgs, &out)?;
            for r in &table.rows {
                println!("{} {} vs {} ({}): {:.1}%", r.environment, r.method, r.baseline, r.setting, r.improvement_pct);
            }
        }
    }
    Ok(())
}

fn eval(c: &Common, setting: Setting) -> Result<()> {
    let cfg = c.single()?;
    let series = with_threads(c.threads(), || cmd_eval(&cfg, setting))??;
    for s in series {
        println!("{} {}: {:?}", s.method, s.kind.id(), s.mean);
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
