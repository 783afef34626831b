use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CongradError>;

#[derive(Debug, Error)]
pub enum CongradError {
    #[error("rank {rank} is invalid for a {rows}x{cols} matrix")]
    InvalidRank { rank: usize, rows: usize, cols: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("gradient store for language `{language}` has never been updated")]
    EmptyStore { language: String },

    #[error("no usable data: {0}")]
    EmptyData(String),

    #[error("invalid config field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("output directory is in use by another process (lock file {0})")]
    Locked(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CongradError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CongradError::InvalidInput(msg.into())
    }

    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        CongradError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CongradError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration or input,
    /// as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CongradError::Validation { .. }
                | CongradError::InvalidRank { .. }
                | CongradError::InvalidInput(_)
                | CongradError::Parse { .. }
                | CongradError::Format(_)
        )
    }
}
