use std::path::PathBuf;

use seld_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeldError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Csv { path: String, line: usize, msg: String },

    #[error("invalid event list: {0}")]
    Events(String),

    #[error("invalid audio: {0}")]
    Audio(String),

    #[error("clip too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite training state: {0}")]
    NonFinite(String),

    #[error("malformed structured text: {0}")]
    Format(String),
}

pub type Result<T, E = SeldError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> SeldError {
    let path = path.into();
    move |source| SeldError::Io { path, source }
}
