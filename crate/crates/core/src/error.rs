use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum TrasError {
    #[error("degenerate prior: class {class} has zero count and smoothing is 0")]
    DegeneratePrior { class: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl TrasError {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        TrasError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by user configuration rather than runtime failures.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            TrasError::Config { .. } | TrasError::InvalidArgument(_) | TrasError::DegeneratePrior { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, TrasError>;
