use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("finite-difference oracle produced a non-finite value at coordinate {index}")]
    Oracle { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("cross-modal attention needs at least one visual token")]
    EmptyEvidence,

    #[error("backward requires the forward cache, which was dropped")]
    MissingCache,

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("feature file format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("class {class} has {available} samples but {requested} were requested")]
    InsufficientClass {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("attention margin undefined: {0}")]
    UndefinedMargin(String),

    #[error("evaluation set is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
