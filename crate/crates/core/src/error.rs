use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    Param { name: &'static str, reason: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("queue capacity exceeded: batch of {batch} into queue of {capacity}")]
    Capacity { batch: usize, capacity: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },

    #[error("degenerate values at step {step}: {what}")]
    Degenerate { step: u64, what: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Param {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while reading or writing a training checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format (found {found}, expected {expected})")]
    Version { found: String, expected: String },

    #[error("truncated checkpoint: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("checkpoint tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint stores {found} values, this build expects {expected}")]
    Dtype { found: String, expected: String },

    #[error("malformed checkpoint header: {0}")]
    Header(String),
}

/// Failures while loading datasets from disk.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: length {len} is not a multiple of the {record}-byte record size")]
    BadRecordLength {
        path: PathBuf,
        len: u64,
        record: usize,
    },

    #[error("{path}: record {record} has label {label}, expected 0..=9")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("unknown split `{0}` (expected train or test)")]
    UnknownSplit(String),
}
