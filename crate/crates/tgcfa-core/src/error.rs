//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Input violated a documented precondition or invariant.
    #[error("validation: {0}")]
    Validation(String),

    /// A structured input file did not match its schema.
    #[error("schema error in {path}: {message}")]
    Schema { path: PathBuf, message: String },

    /// A binary container had a corrupt or unexpected layout.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A text encoder provider could not produce embeddings.
    #[error("encoder: {0}")]
    Encoder(String),

    /// A scalar that must be finite was NaN or infinite.
    #[error("numeric: non-finite value in {term}")]
    NonFinite { term: String },

    /// An index was outside its valid range.
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// Scene generation could not satisfy the configured constraints.
    #[error("generation: {0}")]
    Generation(String),

    /// The training loader was asked for data outside the allowed splits.
    #[error("data hygiene violation: {0}")]
    Hygiene(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
