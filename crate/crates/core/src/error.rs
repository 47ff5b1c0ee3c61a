use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("non-finite activations at layer {0}")]
    NonFiniteActivation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures that originate in the arithmetic rather than in
    /// inputs, files or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteInput | Error::NonFiniteActivation(_) | Error::Numeric(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
