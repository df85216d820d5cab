use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid geometry in {op}: {reason}")]
    Geometry { op: &'static str, reason: String },
    #[error("buffer of length {len} does not fill shape {shape:?}")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
