use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("maxpool2: spatial extent {h}x{w} is odd; pad the input to even height and width")]
    OddPoolInput { h: usize, w: usize },

    #[error("unpool2: pool index {index} at cell {cell} lies outside its window")]
    CorruptIndices { cell: usize, index: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: non-finite value in {tensor}")]
    Divergence {
        epoch: usize,
        batch: usize,
        tensor: String,
    },

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown corruption {kind:?} at severity {severity}")]
    UnknownCorruption { kind: String, severity: u8 },

    #[error("exponent fit needs at least 3 cells with disagreement strictly inside (0,1), found {found}; widen the epsilon grid")]
    TooFewInteriorCells { found: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid { op, msg: msg.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
