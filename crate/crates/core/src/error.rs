use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value outside its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input that cannot be normalized or otherwise processed (zero vectors and the like).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index {index} out of range for {len} instances")]
    OutOfRange { index: usize, len: usize },

    #[error("cannot draw {requested} items from a population of {available}")]
    InsufficientPopulation { requested: usize, available: usize },

    #[error("anchor {0} has no negative candidates")]
    NoNegatives(usize),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
