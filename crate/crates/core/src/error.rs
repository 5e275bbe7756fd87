use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty segment")]
    EmptySegment,
    #[error("format/segment mismatch: {0}")]
    FormatSegmentMismatch(String),
    #[error("mask/format mismatch: {0}")]
    MaskFormatMismatch(String),
    #[error("sequence too long: {len} tokens exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("index {index} out of range for sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty batch for {0}")]
    EmptyBatch(String),
    #[error("backward already run on this tape")]
    BackwardTwice,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("missing field {field} @ line {line}")]
    MissingField { field: String, line: usize },
    #[error("malformed line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("corpus too small: {0}")]
    CorpusTooSmall(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
