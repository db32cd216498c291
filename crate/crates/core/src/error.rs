use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {len} rows in {op}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate variance in {op}: need at least 2 positions per channel, got {positions}")]
    DegenerateVariance { op: &'static str, positions: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty point set passed to {0}")]
    EmptySet(&'static str),

    #[error("degenerate surface: {0}")]
    Surface(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: unsupported version {0:?}")]
    UnsupportedVersion(String),

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: tensor {name} declares {declared} elements but footer says {footer}")]
    Integrity {
        name: String,
        declared: u64,
        footer: u64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
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

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
