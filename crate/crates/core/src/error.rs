use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("resource limit exceeded: {0}")]
    Resource(String),
    #[error("tensor is not normal: {0}")]
    NotNormal(String),
    #[error("optimizer failed: {0}")]
    Optimizer(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn argument<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
