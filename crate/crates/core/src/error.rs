use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid action {action:?}; valid actions are {valid:?}")]
    InvalidAction { action: String, valid: Vec<String> },
    #[error("episode already finished")]
    EpisodeDone,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("prior oracle failed: {0}")]
    Oracle(String),
    #[error("non-finite value during training: {0}")]
    NonFinite(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
