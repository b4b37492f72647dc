use std::path::PathBuf;

use autodiff::AdError;
use thiserror::Error;

use crate::grammar::GrammarError;
use crate::world::oracle::OracleError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("token {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
