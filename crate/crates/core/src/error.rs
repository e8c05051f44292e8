use std::io;

use thiserror::Error;

/// Errors produced by index construction, search and storage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("storage error on vector {id}: {source}")]
    Storage {
        id: u32,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
