use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header in {context}: {reason}")]
    MalformedHeader { context: String, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("depth map contains non-positive value {value} at flat index {index}")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::InvalidConfig(_) => "config",
            Error::Io { .. } => "io",
            Error::MalformedHeader { .. } => "malformed-header",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::NonPositiveDepth { .. } => "non-positive-depth",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non-finite-loss",
            Error::EmptyDataset(_) => "empty-dataset",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
