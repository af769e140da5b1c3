use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: output contains NaN or infinite values")]
    NonFinite { op: &'static str },

    #[error("tensor shape {shape:?} has a zero extent")]
    InvalidShape { shape: Vec<usize> },

    #[error("tensor shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("backward called before any forward operation reached node {node}")]
    BackwardBeforeForward { node: usize },

    #[error("seed gradient shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },

    #[error("function output must be scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },

    #[error("batch normalization in training mode needs at least 2 samples, got {batch}")]
    BatchTooSmall { batch: usize },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}
