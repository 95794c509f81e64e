use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("step vector has {got} entries, model expects {expected}")]
    StepLength { expected: usize, got: usize },

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
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

    /// True for failures caused by the content of the data rather than its
    /// syntax (all-zero tensors, empty datasets).
    pub fn is_degenerate(&self) -> bool {
        matches!(self, Error::Degenerate(_) | Error::EmptyDataset)
    }
}
