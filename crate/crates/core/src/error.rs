use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("vocab_size {requested} is too small: corpus has {chars} distinct characters, need at least {floor}")]
    VocabTooSmall { requested: usize, chars: usize, floor: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("corpus too small: no (center, context) pairs")]
    CorpusTooSmall,

    #[error("embedding dimension {table} does not match model hidden size {model}")]
    DimensionMismatch { table: usize, model: usize },

    #[error("embedding table was trained for a different vocabulary (hash {table} vs {vocab})")]
    VocabHashMismatch { table: String, vocab: String },

    #[error("no positions to predict")]
    NothingToPredict,

    #[error("sequence must begin with CLS")]
    MissingCls,

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training set contains a single class")]
    SingleClass,

    #[error("duplicate cell id {0:?}")]
    DuplicateCell(String),

    #[error("requested size {requested} exceeds {available} available examples")]
    SizeExceedsData { requested: usize, available: usize },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { what, detail: detail.into() }
    }
}
