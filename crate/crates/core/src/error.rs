//! Error types shared across the library.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix shapes do not agree.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid hyperparameter, config key, or method/toggle combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed dataset, label, or container contents.
    #[error("data error: {0}")]
    Data(String),

    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Evaluation protocol cannot be formed from the given datasets.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Checkpoint container is unreadable or incompatible with the config.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
