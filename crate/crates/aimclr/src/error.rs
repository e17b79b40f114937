//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at flat index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("invalid skeleton graph: {0}")]
    InvalidGraph(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("all entries dropped: {0}")]
    AllDropped(&'static str),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("training aborted at epoch {epoch} step {step}: non-finite loss ({components})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        components: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
