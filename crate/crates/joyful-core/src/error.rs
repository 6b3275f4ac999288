//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {context}: {left:?} vs {right:?}")]
    DimensionMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("corpus error at dialogue {dialogue_id:?}, index {index}: {message}")]
    Corpus {
        dialogue_id: String,
        index: usize,
        message: String,
    },

    #[error("corpus format error: {0}")]
    CorpusFormat(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in dialogue {dialogue_id:?} at epoch {epoch}")]
    NonFiniteLoss { dialogue_id: String, epoch: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dims(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
