use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("degenerate vector (norm {norm:e}) in {op}")]
    DegenerateVector { op: &'static str, norm: f64 },
    #[error("gradient oracle: non-finite function value at coordinate {index}")]
    Oracle { index: usize },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss: {context}")]
    NonFiniteLoss { context: String },
    #[error("invalid label index {0} (expected 0..6)")]
    InvalidLabel(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid scores from source `{source_name}`: {reason}")]
    InvalidScores { source_name: String, reason: String },
    #[error("configuration error: {key}: {reason}")]
    Config { key: String, reason: String },
    #[error("missing prediction for id `{0}`")]
    MissingPrediction(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn config(key: &str, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
