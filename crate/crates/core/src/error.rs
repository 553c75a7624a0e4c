use std::path::PathBuf;

use crate::autodiff::AutogradError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("kernel matrix is not positive definite even with jitter {jitter:e}")]
    DegenerateKernel { jitter: f64 },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: need at least 2 distinct rows, found {rows}")]
    InsufficientData { path: PathBuf, rows: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0} has no latent path")]
    UnsupportedModel(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
