use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("wrong point count: expected {expected}, got {got}")]
    PointCount { expected: usize, got: usize },

    #[error("leaf slot {0} is not live")]
    DeadSlot(usize),

    #[error("or-node {0} has no free leaf slot")]
    NoFreeSlot(usize),

    #[error("or-node {0} has no live leaf; window cannot be scored")]
    Unscorable(usize),

    #[error("invalid latent assignment: {0}")]
    Assignment(String),

    #[error("solver: {0}")]
    Solver(String),

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Parse and validation failures for the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: unsupported version `{found}`")]
    Version { line: usize, found: String },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("line {line}: point ({x}, {y}) outside {width}x{height} canvas")]
    OutOfBounds {
        line: usize,
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },

    #[error("bad magic bytes")]
    Magic,

    #[error("checksum mismatch (file truncated or corrupt)")]
    Checksum,

    #[error("unsupported model container version {0}")]
    ModelVersion(u32),

    #[error("model container: {0}")]
    Model(String),
}

impl FormatError {
    pub(crate) fn malformed(line: usize, message: impl Into<String>) -> Self {
        FormatError::Malformed {
            line,
            message: message.into(),
        }
    }
}
