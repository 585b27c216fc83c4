use thiserror::Error;

/// Errors surfaced by any layer of the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument for {op}: {msg}")]
    InvalidArgument { op: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("wav decode error in {path}: {msg}")]
    Wav { path: String, msg: String },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("degenerate embedding (norm < 1e-12) at index {index}")]
    DegenerateEmbedding { index: usize },

    #[error("non-finite value in {what} at {context}")]
    NonFinite { what: String, context: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(op: &str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op: op.to_string(),
            msg: msg.into(),
        }
    }

    pub fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
