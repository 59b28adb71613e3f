use std::path::PathBuf;

use thiserror::Error;

use crate::models::Task;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("{0}")]
    InvalidInput(String),

    #[error("{0} is empty after masking")]
    EmptyTask(Task),

    #[error("expression class {class} has no training samples; merge it into class 7 (other) or fix the split")]
    MissingExpressionClass { class: usize },

    #[error("degenerate batch: no task has valid labels")]
    DegenerateBatch,

    #[error("cannot train {task}: {reason}")]
    Degenerate { task: Task, reason: String },

    #[error("samples are misaligned: {0}")]
    Misaligned(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }
}
