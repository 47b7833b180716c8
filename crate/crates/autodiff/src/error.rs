use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("lookup error in column `{column}`: index {index} out of range for vocabulary of {vocab}")]
    Lookup {
        column: String,
        index: usize,
        vocab: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite gradient for parameter `{param}` at optimizer step {step}")]
    NonFiniteGradient { step: u64, param: String },
}
