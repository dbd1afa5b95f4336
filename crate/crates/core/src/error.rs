use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments that violate an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A value is outside the domain of the requested computation (zero vector
    /// under cosine, NaN at ingest).
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed file contents: bad magic, unsupported version, ragged records.
    #[error("format error: {0}")]
    Format(String),

    /// Structural inconsistency: truncated file, checksum mismatch, unknown
    /// node, hierarchy that does not cover the dataset.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("storage error at {path}:{offset}: {source}")]
    Storage {
        path: PathBuf,
        offset: u64,
        #[source]
        source: io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub(crate) fn storage(path: impl Into<PathBuf>, offset: u64, source: io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            offset,
            source,
        }
    }
}
