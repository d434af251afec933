use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::pack::PackError;
use crate::problem::ProblemError;
use crate::synth::GenError;
use crate::tensor::{Float, TensorError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Pack(#[from] PackError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite loss at step {step}: {cause}; batch problem ids {batch_ids:?}; parameter norms {param_norms:?}")]
    NonFiniteLoss { step: u64, cause: String, batch_ids: Vec<u64>, param_norms: Vec<(String, Float)> },
    #[error("invalid data: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
