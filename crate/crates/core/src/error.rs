use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Format(String),
    #[error("invalid value: {0}")]
    Value(String),
    #[error("measure has no atoms")]
    Empty,
    #[error("operation requires the euclidean norm, got {0:?}")]
    UnsupportedNorm(crate::measure::NormKind),
    #[error("quantile direction must have norm < 1, got {0}")]
    InvalidDirection(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("outside the domain of the operation: {0}")]
    Domain(String),
    #[error("every atom coincides with the evaluation point")]
    Degenerate,
    #[error("hessian is singular (lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e})")]
    SingularHessian { lambda_min: f64, lambda_max: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to bad input) get a distinct exit code
    /// in the command-line tool.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Degenerate | Error::SingularHessian { .. })
    }
}
