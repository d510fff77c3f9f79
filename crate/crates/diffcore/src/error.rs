use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("cholesky: matrix of order {order} is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { order: usize, jitter: f64 },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward: tape is empty")]
    EmptyTape,

    #[error("backward: tape already consumed by a previous backward pass; reset it first")]
    TapeConsumed,

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("adam: non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("adam: gradient shape {grad:?} does not match parameter `{name}` shape {param:?}")]
    GradientShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, DiffError>;
