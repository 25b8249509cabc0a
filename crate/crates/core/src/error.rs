use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown view keyword {0:?} (expected one of \"SAX\", \"LAX\")")]
    UnknownView(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("duplicate scan id {0:?}")]
    DuplicateScan(String),
}

/// Structured parse failures of the on-disk containers.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated payload: field `{field}` needs {needed} bytes, {available} available")]
    Truncated { field: &'static str, needed: usize, available: usize },
    #[error("dimension overflow in field `{0}`")]
    DimensionOverflow(&'static str),
    #[error("invalid value {value} in field `{field}`")]
    InvalidField { field: &'static str, value: String },
    #[error("trailing bytes after payload: {0}")]
    Trailing(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
