use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the tracker library.
#[derive(Debug, Error)]
pub enum TsfError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("malformed training sample: {0}")]
    MalformedSample(String),

    #[error("model corruption: {0}")]
    ModelCorruption(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("plot error: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TsfError {
    /// True for errors that indicate a numerical failure (NaN, divergence, corrupted weights).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            TsfError::ModelCorruption(_) | TsfError::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TsfError>;
