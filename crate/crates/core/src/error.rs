use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DaeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("wire format error: {0}")]
    Format(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at step {step}: {summary}")]
    NonFinite { step: u64, summary: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DaeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DaeError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DaeError::Config(msg.into())
    }

    /// Short stable identifier, used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            DaeError::InvalidInput(_) => "invalid_input",
            DaeError::Config(_) => "config",
            DaeError::Checkpoint(_) => "checkpoint",
            DaeError::Format(_) => "format",
            DaeError::Parse { .. } => "parse",
            DaeError::NonFinite { .. } => "non_finite",
            DaeError::Tensor(_) => "tensor",
            DaeError::Io(_) => "io",
            DaeError::Json(_) => "json",
            DaeError::Image(_) => "image",
            DaeError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, DaeError>;
