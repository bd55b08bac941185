use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
