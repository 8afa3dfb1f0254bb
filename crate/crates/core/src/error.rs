use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {index} out of range for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("exhaustive enumeration needs 2^{bits} states, limit is 2^{limit}")]
    EnumerationLimit { bits: usize, limit: usize },

    #[error("strategy {strategy} needs a {what} reference snapshot")]
    MissingReference {
        strategy: &'static str,
        what: &'static str,
    },

    #[error("class {0} has no examples")]
    EmptyClass(usize),

    #[error("{path}: wrong IDX magic, expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    RaggedRow {
        path: PathBuf,
        line: u64,
        expected: usize,
        found: usize,
    },

    #[error("{path}:{line}: cannot parse {cell:?} as a number")]
    NonNumeric {
        path: PathBuf,
        line: u64,
        cell: String,
    },

    #[error("{path}:{line}: unseen label {label:?}")]
    UnseenLabel {
        path: PathBuf,
        line: u64,
        label: String,
    },

    #[error("checkpoint has unknown tag {0:?}")]
    CheckpointVersion(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint inconsistent: {0}")]
    CheckpointInconsistent(String),

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used by the CLI for its exit status.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. }
            | Error::Empty(_)
            | Error::InvalidArgument(_)
            | Error::InvalidClass { .. } => "invalid-input",
            Error::NonFinite(_) | Error::EnumerationLimit { .. } => "numeric",
            Error::MissingReference { .. } => "prerequisite",
            Error::EmptyClass(_)
            | Error::WrongMagic { .. }
            | Error::Truncated { .. }
            | Error::CountMismatch { .. }
            | Error::RaggedRow { .. }
            | Error::NonNumeric { .. }
            | Error::UnseenLabel { .. }
            | Error::Csv(_) => "data",
            Error::CheckpointVersion(_)
            | Error::CheckpointTruncated(_)
            | Error::CheckpointInconsistent(_) => "checkpoint",
            Error::Config(_) | Error::Json(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
