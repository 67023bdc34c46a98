use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("invalid axis {axis} for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("all key positions are masked for query row {row}")]
    AllKeysMasked { row: usize },
    #[error("all target positions are ignored; mean loss is undefined")]
    AllPositionsIgnored,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("candidate pool too small: need at least {need} distinct texts, got {got}")]
    PoolTooSmall { need: usize, got: usize },
    #[error("rank {rank} outside valid range [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("checkpoint shape mismatch for {name}: manifest {manifest:?}, expected {expected:?}")]
    CheckpointShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint payload truncated: need {need} bytes, got {got}")]
    CheckpointTruncated { need: usize, got: usize },
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, current {current}")]
    VocabHashMismatch { checkpoint: String, current: String },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
