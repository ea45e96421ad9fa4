use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the synthesis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("capacity exceeded: {len} frames > max {max}")]
    Capacity { len: usize, max: usize },

    #[error("decoding error at position {position}: {reason}")]
    Decoding { position: usize, reason: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::InvalidInput(_) | Error::Io { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
