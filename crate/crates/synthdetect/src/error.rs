//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes the toolkit reports.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A required dataset subdirectory is missing.
    #[error("missing dataset subdirectory: {0}")]
    MissingDirectory(PathBuf),

    /// An image file could not be decoded.
    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    /// An image (or tensor) has dimensions outside the operation's domain.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Tensor/matrix shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violates the operation's preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A stratified sample was requested beyond the available counts.
    #[error("capacity error: requested {requested} per class but only {available_fake} FAKE / {available_real} REAL available")]
    Capacity {
        requested: usize,
        available_fake: usize,
        available_real: usize,
    },

    /// Training could not proceed (e.g. single-class input).
    #[error("training error: {0}")]
    Training(String),

    /// An operation was called in an invalid state (e.g. backward twice).
    #[error("state error: {0}")]
    State(String),

    /// A caller broke an API contract (non-scalar loss, pipeline mismatch, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// The model lacks the structure an operation requires.
    #[error("structural error: {0}")]
    Structure(String),

    /// A metric is undefined for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A checkpoint or artifact file is malformed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A configuration field failed validation.
    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Underlying I/O failure.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
