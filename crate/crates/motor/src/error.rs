use thiserror::Error;

#[derive(Debug, Error)]
pub enum MotorError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset: no interaction edges")]
    EmptyDataset,

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: {msg}")]
    Shape { msg: String },

    #[error("feature dim {dim} not divisible by slot count {slots}")]
    Divisibility { dim: usize, slots: usize },

    #[error("token id {token} out of range [0, {k})")]
    TokenCorruption { token: usize, k: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("negative sampling failed: user {user} interacts with every item")]
    SamplingExhausted { user: usize },

    #[error("non-finite loss in batch {batch}: {msg}")]
    NonFiniteLoss { batch: usize, msg: String },

    #[error("empty validation split; disable early stopping or provide validation data")]
    EmptyValidation,

    #[error("unknown item id: {0}")]
    UnknownItem(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MotorError>;
