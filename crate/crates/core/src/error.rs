use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CemError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CemError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NonPositiveDefinite { pivot: usize, value: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("mixture covariances were not updated for this batch assignment")]
    StaleState,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tape does not match the module state it was recorded against")]
    StaleTape,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("unknown defense `{0}` (expected `none` or `noise_only`)")]
    UnknownDefense(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl CemError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CemError::Io {
            path: path.into(),
            source,
        }
    }
}
