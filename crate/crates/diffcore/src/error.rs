use thiserror::Error;

/// Errors raised while recording or differentiating a computation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("div: denominator {value:e} at index {index} is smaller than 1e-12 in magnitude")]
    DivisionByZero { index: usize, value: f64 },
    #[error("{op}: input {value:e} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("variable does not belong to this graph")]
    ForeignVar,
    #[error("non-finite loss {value} while probing parameter `{param}` at index {index}")]
    NonFinite {
        param: String,
        index: usize,
        value: f64,
    },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T> = std::result::Result<T, DiffError>;
