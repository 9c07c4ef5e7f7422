use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("empty loss: no positions selected by the mask")]
    EmptyLoss,
}

pub type Result<T> = std::result::Result<T, NumericsError>;
