use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tokenize: {0}")]
    Tokenize(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("editor state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;
