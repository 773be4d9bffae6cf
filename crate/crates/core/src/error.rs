use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("scalar/inner solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("zero Fourier mode is singular: mean {mean:.3e} exceeds tolerance for a mean-zero operation")]
    SingularMode { mean: f64 },

    #[error("domain mismatch between fields")]
    DomainMismatch,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("out of domain: {0}")]
    DomainError(String),

    #[error("non-finite value detected at step {step} (t = {time}): {detail}")]
    NaNDetected { step: u64, time: f64, detail: String },

    #[error("positivity violated at step {step} (t = {time}): min {min:.3e} below {threshold:.3e}")]
    PositivityViolation {
        step: u64,
        time: f64,
        min: f64,
        threshold: f64,
    },

    #[error("rescaled solver requires spatially constant noise modes (mode {0} is not constant)")]
    RescalingInapplicable(usize),

    #[error("C* search reached its cap {cap:.3e} without a passing value")]
    ReachedCap { cap: f64 },

    #[error("ensemble failure budget exceeded: {failed} of {total} paths aborted")]
    EnsembleFailed { failed: usize, total: usize },

    #[error("schema error at `{path}`: {message}")]
    SchemaError { path: String, message: String },

    #[error("inconsistent configuration: `{first}` vs `{second}`: {message}")]
    ConsistencyError {
        first: String,
        second: String,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
