use std::io;

use thiserror::Error;

/// Errors raised anywhere in the recognizer stack.
#[derive(Debug, Error)]
pub enum DanError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("vocabulary mismatch: {0}")]
    Vocab(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DanError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::DanError::Shape(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::DanError::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use shape_err;
