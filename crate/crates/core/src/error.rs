use std::path::PathBuf;

use thiserror::Error;

use crate::altmin::EpochTrace;

pub type Result<T, E = TcmfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TcmfError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("singular input: {0}")]
    Singularity(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// The inner solver's objective kept increasing (or became non-finite).
    /// `objective` holds every value recorded before the solver gave up.
    #[error("solver diverged after {} iterations: {reason}", objective.len())]
    Divergence { reason: String, objective: Vec<f64> },

    /// A failure inside the outer loop; `partial` holds the epochs that completed.
    #[error("epoch {epoch} failed: {source}")]
    Epoch {
        epoch: usize,
        #[source]
        source: Box<TcmfError>,
        partial: Vec<EpochTrace>,
    },

    #[error("corrupt data in {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TcmfError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        TcmfError::Dimension(msg.into())
    }

    pub(crate) fn singular(msg: impl Into<String>) -> Self {
        TcmfError::Singularity(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        TcmfError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcmfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through epoch wrappers.
    pub fn root(&self) -> &TcmfError {
        match self {
            TcmfError::Epoch { source, .. } => source.root(),
            other => other,
        }
    }
}
