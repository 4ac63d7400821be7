use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in stage {stage} of step {step}")]
    Divergence { step: usize, stage: usize },

    #[error("target gap {gap} is not an integer multiple of step {h}")]
    Alignment { gap: f64, h: f64 },

    #[error("order cannot be determined: {0}")]
    IndeterminateOrder(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no real root of T_{p}(w dt) = exp(lambda dt) for lambda={lambda}, dt={dt}")]
    NoRoot { lambda: f64, dt: f64, p: u32 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
