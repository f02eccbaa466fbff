use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {}: {source}", path.display())]
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

    /// True for failures caused by non-finite values during a step.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Tensor(TensorError::NonFinite { .. }))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
