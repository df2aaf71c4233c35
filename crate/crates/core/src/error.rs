use thiserror::Error;

use crate::data::DataError;
use crate::encoder::FeatureError;
use crate::tensor::TensorError;

/// Errors raised by the model, training and checkpoint layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("predictions reference unknown conversations: {}", .0.join(", "))]
    UnknownConversations(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;
