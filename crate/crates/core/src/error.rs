use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("head dimension {0} must be divisible by 4 for 2D rotary embeddings")]
    OddHeadDim(usize),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mesh has no usable triangles")]
    EmptyMesh,

    #[error("retrieval database is empty")]
    EmptyDatabase,

    #[error("query {0} has no ground-truth entry in the database")]
    MissingGroundTruth(usize),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Training produced a non-finite loss. `last_good_step` is the number of
    /// completed steps whose parameters are still valid.
    #[error("loss diverged at step {step}; last good step was {last_good_step}")]
    Diverged { step: usize, last_good_step: usize },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
