use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: {lhs} vs {rhs}")]
    DType {
        op: &'static str,
        lhs: &'static str,
        rhs: &'static str,
    },

    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("accounting bug: {0}")]
    AccountingBug(String),

    #[error("invalid {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("chunk {index} out of range for a plan with {chunks} chunks")]
    ChunkOutOfRange { index: usize, chunks: usize },

    #[error("label {label} out of range for vocabulary of size {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },

    #[error("resource guard: {0}")]
    Guard(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
