use thiserror::Error;

use crate::autodiff::TensorError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("invalid mask: {0}")]
    Mask(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("loss component '{component}' became non-finite at step {step}")]
    NonFinite { component: String, step: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
