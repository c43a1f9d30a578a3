use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {message}")]
    Json { context: String, message: String },

    #[error("schema violation at `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("invariant violated for sample `{id}`: {message}")]
    Invariant { id: String, message: String },

    #[error("image error on {}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("degenerate polygon: {0} points, at least 3 required")]
    DegeneratePolygon(usize),

    #[error("split error: {0}")]
    Split(String),

    #[error("unsupported imbalance: class `{class}` has {count} samples but healthy has only {healthy}")]
    UnsupportedImbalance {
        class: &'static str,
        count: usize,
        healthy: usize,
    },

    #[error("insufficient synthetic pool for `{class}`: requested {requested}, available {available}")]
    InsufficientPool {
        class: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("perplexity {perplexity} infeasible for row {row}: {message}")]
    Perplexity {
        row: usize,
        perplexity: f64,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}
