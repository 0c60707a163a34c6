use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("negative transmit power {value} for user {user}")]
    NegativePower { user: usize, value: f64 },

    #[error("box width must be positive, got {value} for user {user}")]
    NonPositiveWidth { user: usize, value: f64 },

    #[error("channel gain must be positive and finite, got {value} at ({row}, {col})")]
    NonPositiveGain { row: usize, col: usize, value: f64 },

    #[error("serving channel vector is zero")]
    ZeroServingVector,

    #[error("invalid permutation matrix: {0}")]
    InvalidPermutation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("exhaustive grid search supports at most {limit} users, got {users}")]
    TooLargeForGrid { users: usize, limit: usize },

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },

    #[error("state file: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
