use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the tensor engine, the attack loop and the file formats.
#[derive(Debug, Error)]
pub enum AefError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("div: zero entry in denominator at flat index {index}")]
    DivisionByZero { index: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape: {0}")]
    Tape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("perturbation entry {index} = {value} exceeds budget {budget}")]
    BudgetViolation {
        index: usize,
        value: f64,
        budget: f64,
    },

    #[error("config: {0}")]
    Config(String),
}

impl AefError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        AefError::Io {
            context: context.into(),
            source,
        }
    }

    /// Whether this error should map to the "numerical abort" exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, AefError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, AefError>;
