use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the denoising engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image load error: {0}")]
    ImageFormat(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("model file error: {0}")]
    Model(#[from] ModelError),
}

/// Distinct failure modes when reading or writing a model file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("bad magic")]
    BadMagic,
    #[error("version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("non-finite parameter at payload element {0}")]
    NonFinite(usize),
    #[error("factor {0} has a nonzero strict upper triangle")]
    UpperTriangle(String),
    #[error("invalid header field: {0}")]
    Header(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
