use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite weights or loss at step {step}")]
    NonFinite { step: usize },

    #[error("weight layouts differ ({left} vs {right} parameters)")]
    LayoutMismatch { left: usize, right: usize },

    #[error("corrupted weight file: {0}")]
    CorruptWeights(String),

    #[error("checkpoint schedules differ")]
    ScheduleMismatch,

    #[error("no record for key {0}")]
    MissingRecord(String),

    #[error("record {key} exists with config digest {existing}, refusing to mix with {requested}")]
    DigestMismatch {
        key: String,
        existing: String,
        requested: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
