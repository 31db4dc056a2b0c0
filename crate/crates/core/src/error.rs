use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid feature map: {0}")]
    InvalidFeatures(String),

    #[error("invalid task set: {0}")]
    InvalidTaskSet(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),

    #[error("KL divergence is infinite: zero probability at state {state}, action {action}")]
    InfiniteKl { state: usize, action: usize },

    #[error("zero mass in {measure} at state {state}, action {action}")]
    ZeroMass {
        measure: &'static str,
        state: usize,
        action: usize,
    },

    #[error("network width must be even and at least 2, got {0}")]
    OddWidth(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
