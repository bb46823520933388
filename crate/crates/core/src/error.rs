use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A tensor shape is invalid for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric parameter is outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An index (class label, row, task) is out of range.
    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input data carries no information to fit (e.g. zero variance).
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// A container failed its magic/version/checksum validation.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// The label oracle could not deliver labels.
    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
