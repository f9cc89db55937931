//! Command layer for the `cem-lab` binary: configuration, run manifests and
//! the train / attack / bounds / sweep / report commands.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod sweep;

use std::path::PathBuf;

use cem_core::CemError;
use thiserror::Error;

pub use commands::{cmd_attack, cmd_bounds, cmd_report, cmd_train, load_dataset, Report};
pub use config::LabConfig;
pub use manifest::{run_id, RunManifest};
pub use sweep::{cmd_sweep, SweepFit, SweepRow};

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] CemError),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("usage: {0}")]
    Usage(String),
}

impl LabError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } | LabError::Usage(_) => 2,
            LabError::Core(_) | LabError::MissingArtifact { .. } => 1,
        }
    }
}
