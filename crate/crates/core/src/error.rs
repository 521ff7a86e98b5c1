use thiserror::Error;

/// Errors raised by the numeric kernels, networks, trainers and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("support violation at index {index}: q is zero where p = {p}")]
    Support { index: usize, p: f64 },

    #[error("index {index} out of range for {len} rows")]
    OutOfRange { index: usize, len: usize },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("config digest collision for {digest}")]
    DigestCollision { digest: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(what: impl Into<String>) -> Self {
        Error::Shape(what.into())
    }

    pub(crate) fn invalid(what: impl Into<String>) -> Self {
        Error::InvalidArgument(what.into())
    }
}
