use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CraftError>;

#[derive(Debug, Error)]
pub enum CraftError {
    /// Caller supplied inconsistent shapes or out-of-range parameters.
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("malformed npy file: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Input data violates a domain requirement (non-finite values, negative activations, ...).
    #[error("data error: {0}")]
    Data(String),

    #[error("no sample predicted as class {class}")]
    EmptyClassSet { class: i64 },

    #[error("only {selected} crops exceed the percentile threshold, at least {required} needed")]
    InsufficientData { selected: usize, required: usize },

    /// Strict complementarity fails at the listed (row, column) coordinates.
    #[error("degenerate active set at {} coordinate(s), first {:?}", coords.len(), coords.first())]
    Degenerate { coords: Vec<(usize, usize)> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CraftError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CraftError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        CraftError::Argument(msg.into())
    }
}
