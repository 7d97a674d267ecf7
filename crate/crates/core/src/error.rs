use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error(
        "semantic-id collision cannot be resolved: {colliding} items share prefix {prefix:?} but only {k} codes exist at the last level"
    )]
    CollisionExhausted {
        prefix: Vec<u32>,
        colliding: usize,
        k: usize,
    },

    #[error("duplicate semantic id {tokens:?} (items {first} and {second})")]
    DuplicateId {
        tokens: Vec<u32>,
        first: u32,
        second: u32,
    },

    #[error("invalid trie prefix {0:?}")]
    InvalidPrefix(Vec<u32>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence of length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },

    #[error("bad EMB file {path}: {msg}")]
    Emb { path: PathBuf, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn mismatch(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    /// True for errors caused by user-supplied configuration rather than
    /// a failing computation.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
