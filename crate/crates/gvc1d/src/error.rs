use thiserror::Error;

/// Error type shared across the codec pipeline.
#[derive(Debug, Error)]
pub enum GvcError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GvcError>;

impl GvcError {
    pub fn dim(msg: impl Into<String>) -> Self {
        GvcError::Dim(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        GvcError::Config(msg.into())
    }
}
