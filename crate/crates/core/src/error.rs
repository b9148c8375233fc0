use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PieError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("coupling partition needs an even width, got {0}")]
    OddPartition(usize),
    #[error("non-finite scale produced by {layer}")]
    NonFiniteScale { layer: String },
    #[error("coupling inverse hit a (near-)zero scale in {layer}")]
    Singular { layer: String },
    #[error("non-finite activation after block {block}, layer {layer}")]
    NonFiniteActivation { block: usize, layer: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient; optimizer step rejected")]
    NonFiniteGradient,
    #[error("training diverged at step {step}")]
    Divergence {
        step: u64,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PieError>;
