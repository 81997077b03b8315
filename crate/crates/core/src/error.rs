use limo_chem::ChemError;
use limo_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LimoError {
    #[error(transparent)]
    Chem(#[from] ChemError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(std::path::PathBuf),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("held-out targets have zero variance")]
    ZeroVariance,
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = LimoError> = std::result::Result<T, E>;
