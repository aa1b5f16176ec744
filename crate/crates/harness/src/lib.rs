//! Experiment driver: configuration, the dataset → train → evaluate pipeline,
//! ablations, improvement tables and plots.

pub mod config;
pub mod improvement;
pub mod pipeline;
pub mod plot;

use std::path::PathBuf;

use sad_core::datagen::DatagenError;
use sad_core::eval::EvalError;
use sad_core::model::ModelError;
use sad_core::trainer::TrainError;

pub use config::{ExperimentConfig, Precision};
pub use improvement::{improvement, Direction, ImprovementTable};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("improvement undefined for ours={ours}, baseline={baseline}: zero denominator")]
    ZeroDenominator { ours: f64, baseline: f64 },
    #[error("malformed artifact {}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for configuration errors, 3 for missing
    /// artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigInvalid(_) => 2,
            HarnessError::MissingArtifact(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
