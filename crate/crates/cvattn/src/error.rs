//! Error type shared across the crate.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CvError {
    /// Tensor shapes incompatible for the requested operation.
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A 2x2 matrix violated the positive-definiteness criterion.
    NotPositiveDefinite { a: f64, b: f64, c: f64 },
    /// A softmax row contained no finite entry.
    FullyMaskedRow { row: usize },
    /// Caller violated an operation precondition.
    InvalidArgument(String),
    /// Configuration key missing, unknown or out of range.
    Config { key: String, message: String },
    /// Malformed checkpoint, dataset or manifest file.
    DataFormat(String),
    /// Training aborted on a non-finite loss.
    Diverged { epoch: usize, detail: String },
    Io(String),
}

impl fmt::Display for CvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CvError::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: shape mismatch, expected {expected}, got {got}"),
            CvError::NotPositiveDefinite { a, b, c } => write!(
                f,
                "matrix [[{a}, {b}], [{b}, {c}]] is not positive definite"
            ),
            CvError::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} has no finite entry")
            }
            CvError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            CvError::Config { key, message } => write!(f, "config key `{key}`: {message}"),
            CvError::DataFormat(msg) => write!(f, "malformed data: {msg}"),
            CvError::Diverged { epoch, detail } => {
                write!(f, "training diverged at epoch {epoch}: {detail}")
            }
            CvError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for CvError {}

impl From<std::io::Error> for CvError {
    fn from(e: std::io::Error) -> Self {
        CvError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CvError>;
