use std::path::PathBuf;

use sue_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (batch seed {batch_seed:#x}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        batch_seed: u64,
        detail: String,
    },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("shape mismatch for tensor `{name}`: checkpoint {found:?}, model {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor `{0}` missing from checkpoint")]
    MissingTensor(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code used in machine-readable CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Dimension(_)) => "dimension",
            Error::Tensor(TensorError::Domain(_)) => "domain",
            Error::Tensor(TensorError::Contract(_)) | Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Checkpoint(CheckpointError::BadMagic) => "checkpoint_magic",
            Error::Checkpoint(CheckpointError::Version { .. }) => "checkpoint_version",
            Error::Checkpoint(CheckpointError::Truncated(_)) => "checkpoint_truncated",
            Error::Checkpoint(CheckpointError::ShapeMismatch { .. }) => "checkpoint_shape",
            Error::Checkpoint(CheckpointError::MissingTensor(_)) => "checkpoint_missing",
            Error::Checkpoint(CheckpointError::Corrupt(_)) => "checkpoint_corrupt",
            Error::NonFinite { .. } => "non_finite",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
