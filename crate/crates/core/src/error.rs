use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid product space: {0}")]
    InvalidSpace(String),

    #[error("outcome count {count} exceeds cap {cap}")]
    CapExceeded { count: String, cap: u64 },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("solver did not certify: upper {upper:.3e}, lower {lower:.3e} after {iterations} iterations")]
    NotCertified {
        upper: f64,
        lower: f64,
        iterations: usize,
    },

    #[error("invalid subspace: {0}")]
    InvalidSubspace(String),

    #[error("degenerate subspace: {0}")]
    Degenerate(String),

    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("retries exhausted in round {round} after {attempts} attempts")]
    RetriesExhausted { round: usize, attempts: usize },

    #[error("density provider failed: {0}")]
    DensityProvider(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}
