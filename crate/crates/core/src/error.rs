use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },

    #[error("unknown passage id {0}")]
    UnknownPid(u64),

    #[error("no embedding for id {0}")]
    MissingEmbedding(u64),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("passage {0} is empty after trimming")]
    EmptyPassage(u64),

    #[error("empty token matrix")]
    EmptyMatrix,

    #[error("row {row} of entry {id} has zero norm")]
    ZeroNormRow { id: u64, row: usize },

    #[error("bad magic bytes {found:?} in {path}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported format version {found} in {path}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path} is truncated: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid field for {what}: {reason}")]
    InvalidField { what: String, reason: String },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("no training triples: {with_positive} of {total} questions had a positive")]
    NoTriples { total: usize, with_positive: usize },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by bad or inconsistent input data, as opposed
    /// to failures that happen while a computation is running.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. } | Error::NoTriples { .. })
    }
}
