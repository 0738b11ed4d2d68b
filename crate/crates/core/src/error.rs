use thiserror::Error;

/// Errors produced anywhere in the learning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("node {0} is not part of the tree")]
    UnknownNode(usize),

    #[error("ill-conditioned input: {0}")]
    IllConditioned(String),

    #[error("sample set has no samples")]
    EmptySamples,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("finite distances do not connect all nodes; components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("local recursive grouping stalled in group led by {leader}; active set {active:?}")]
    NonConvergence { leader: usize, active: Vec<usize> },

    #[error("model violation: {0}")]
    ModelViolation(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("observed leaf sets differ: {0}")]
    LeafMismatch(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
