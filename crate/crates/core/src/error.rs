use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UktlError>;

#[derive(Debug, Error)]
pub enum UktlError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mode {mode} out of range for order-{order} tensor")]
    ModeOutOfRange { mode: usize, order: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("model is not fitted: {0}")]
    NotFitted(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown label {0}")]
    UnknownLabel(usize),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl UktlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UktlError::Io {
            path: path.into(),
            source,
        }
    }
}
