use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("non-stationary parameters: spectral radius {radius:.6} >= 1")]
    NonStationary { radius: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("non-PSD volatility at day {day}, substep {substep}: min eigenvalue {min_eig:.3e}")]
    NonPsdVolatility { day: usize, substep: usize, min_eig: f64 },

    #[error("window exceeds sample: {ticks} ticks but window needs {required}")]
    WindowExceedsSample { ticks: usize, required: usize },

    #[error("non-finite price for asset {asset} on day {day}")]
    NonFinitePrice { asset: usize, day: usize },

    #[error("invalid tick panel: {0}")]
    InvalidPanel(String),

    #[error("rank-deficient design matrix (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("objective is not finite at the initial point; try a different initial value")]
    NonFiniteObjective,

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("study aborted: {failed} of {total} replications failed")]
    StudyAborted { failed: usize, total: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(expected: impl ToString, actual: impl ToString) -> Error {
    Error::DimensionMismatch { expected: expected.to_string(), actual: actual.to_string() }
}
