use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("image too small: {0}")]
    TooSmall(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot load pair ({left}, {right}): {reason}")]
    Load { left: PathBuf, right: PathBuf, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("range coder: {0}")]
    Coder(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("training fault at step {step}: {reason}")]
    Training { step: usize, reason: String },
    #[error("curves do not overlap: reference {reference:?}, test {test:?}")]
    Overlap { reference: (f64, f64), test: (f64, f64) },
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
