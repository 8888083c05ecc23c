use thiserror::Error;

/// Errors produced anywhere in the codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate coordinate {0:?}")]
    DuplicateCoord([i32; 3]),
    #[error("row {row} out of range for {len} rows")]
    RowOutOfRange { row: usize, len: usize },
    #[error("tape already replayed; reset it before another backward pass")]
    TapeReplayed,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("entropy model: {0}")]
    Entropy(String),
    #[error("range coder: {0}")]
    Coder(String),
    #[error("truncated stream")]
    Truncated,
    #[error("bitstream: {0}")]
    Bitstream(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("ply header line {line}: {msg}")]
    PlyHeader { line: usize, msg: String },
    #[error("ply: {0}")]
    Ply(String),
    #[error("image: {0}")]
    Image(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
