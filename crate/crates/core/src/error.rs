use thiserror::Error;

/// Errors raised by tensor algebra, compression and the layer stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires rank >= {min}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        min: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("dtype mismatch in {op}: {lhs} vs {rhs}")]
    DType {
        op: &'static str,
        lhs: crate::DType,
        rhs: crate::DType,
    },
    #[error("layer {layer_id}: sub-token size M={m} does not divide depth D={d}")]
    SubTokenSize { layer_id: String, d: usize, m: usize },
    #[error("invalid state: {0}")]
    State(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, Error>;
