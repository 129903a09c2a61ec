use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("eta = {eta} violates the {bound} bound {limit}")]
    Domain {
        eta: f64,
        bound: &'static str,
        limit: f64,
    },

    #[error("expected eta_s <= eta_t, got eta_s = {eta_s}, eta_t = {eta_t}")]
    Ordering { eta_s: f64, eta_t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("quadrature resolution insufficient: normalization off by {error:e}")]
    Resolution { error: f64 },

    #[error("support violation: q vanishes at x = {x} where p = {p:e}")]
    SupportViolation { x: f64, p: f64 },

    #[error("numerical inconsistency: {0}")]
    NumericalInconsistency(String),

    #[error("proposal density is zero at eta = {eta}")]
    ProposalSupport { eta: f64 },

    #[error("root finder did not converge after {iterations} iterations (target u = {target})")]
    RootFinding { iterations: usize, target: f64 },

    #[error("singular conversion: {0}")]
    Singularity(String),

    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("bound violated: slack {slack:e} below -{tolerance:e}")]
    BoundViolation { slack: f64, tolerance: f64 },

    #[error("checkpoint decode failed: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
