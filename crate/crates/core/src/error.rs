use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("invalid grid: {0}")]
    Shape(String),

    #[error("non-finite value at vertex {0}")]
    NonFinite(usize),

    #[error("vertex {0} out of range for a grid of {1} vertices")]
    VertexOutOfRange(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Inputs that are individually valid but cannot be combined: mismatched dims, pair
    /// kinds, strides or preprocessing.
    #[error("incompatible inputs: {0}")]
    Mismatch(String),

    /// Inputs that violate a structural invariant (e.g. a tree that does not belong to the
    /// given pairs).
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
