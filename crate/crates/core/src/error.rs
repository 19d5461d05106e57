use thiserror::Error;

/// Errors raised by the sparse engine, encoders, network and training code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate coordinate {0}")]
    DuplicateCoord(String),
    #[error("coordinate {coord} out of bounds for shape {shape:?} (batch size {batch_size})")]
    OutOfBounds {
        coord: String,
        shape: Vec<usize>,
        batch_size: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid kernel spec: {0}")]
    InvalidSpec(String),
    #[error("invalid grid config: {0}")]
    InvalidGrid(String),
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("batch norm in train mode needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("pooling over an empty group")]
    EmptyGroup,
    #[error("malformed point buffer: {0} bytes is not a multiple of 16")]
    MalformedLength(usize),
    #[error("constructor kernel does not match the grid: {0}")]
    ConfigMismatch(String),
    #[error("stride mismatch: {0}")]
    StrideMismatch(String),
    #[error("no active sites to assign targets to")]
    NoActiveSites,
    #[error("non-differentiable point persisted after {0} resamples")]
    NonDifferentiablePoint(usize),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
