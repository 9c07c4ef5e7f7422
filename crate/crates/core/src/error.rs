use thiserror::Error;
use unigrid_numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown word: {0:?}")]
    Vocabulary(String),
    #[error("sequence too long: {len} > {max}")]
    Length { len: usize, max: usize },
    #[error("incomplete sequence: MASK token at position {0}")]
    Incomplete(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("stage ordering error: {0}")]
    Ordering(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("non-finite loss in task {task}")]
    NonFinite { task: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
