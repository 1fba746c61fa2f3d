use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum CmaError {
    #[error("dimension mismatch: {context} (lhs shape {lhs:?}, rhs shape {rhs:?})")]
    Dim {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("file format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CmaError>;

impl CmaError {
    pub fn dim(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        CmaError::Dim {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
