use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rectangle [{x1}, {y1}, {x2}, {y2}]")]
    InvalidRect { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training set needs both classes ({positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },

    #[error("no positive bags")]
    NoPositiveBags,

    #[error("no negative bags")]
    NoNegativeBags,

    #[error("unknown region id {0}")]
    UnknownRegion(usize),

    #[error("constraint conflict in bag {bag}: no feasible positive instance")]
    Infeasible { bag: usize },

    #[error("empty observation set")]
    EmptyHistory,

    #[error("no candidate evidence regions")]
    NoEvidence,

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("instance is not enumerable: {0}")]
    NotEnumerable(String),

    #[error("policy diverged in restart {restart} at iteration {iteration}")]
    Diverged { restart: usize, iteration: usize },

    #[error("no ground truth")]
    NoGroundTruth,

    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: String, expected: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(line: usize, msg: impl Into<String>) -> Self {
        Error::Schema {
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
