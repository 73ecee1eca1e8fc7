use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },

    #[error("row count mismatch: {what} has {found} rows, expected {expected}")]
    RowCountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },

    #[error("zero-norm embedding at row {row}")]
    ZeroNorm { row: usize },

    #[error("image id `{0}` has no quality score")]
    MissingId(String),

    #[error("image id `{0}` appears more than once")]
    DuplicateId(String),

    #[error("image id `{0}` is not part of the dataset")]
    UnknownId(String),

    #[error("no genuine pairs possible: no subject has two or more images")]
    NoGenuinePairs,

    #[error("no impostor pairs possible: fewer than two subjects")]
    NoImpostorPairs,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("pair index {index} out of range for {len} images")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("need at least {needed} impostor scores to resolve FMR {target}, got {found}")]
    TooFewImpostors {
        target: f64,
        needed: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("attribute `{attribute}` missing for image `{image_id}`")]
    MissingAttribute { attribute: String, image_id: String },

    #[error("dataset has no activation matrix")]
    MissingActivations,

    #[error("no image has at least one genuine and two impostor comparisons")]
    NoLabeledImages,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, err: &csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        Error::Csv {
            path: path.into(),
            line,
            message: err.to_string(),
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            message: err.to_string(),
        }
    }
}
