use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty argument: {0}")]
    EmptyArgument(&'static str),

    #[error("site set is not contained in the field domain")]
    OutsideDomain,

    #[error("eigen-solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    EigenNonConvergence { iterations: usize, residual: f64 },

    #[error("anchor site {0} carries no eigenfunction weight")]
    NullAnchor(String),

    #[error("principal eigenvalue is not simple: gap {gap:.3e} to the next eigenvalue")]
    DegenerateSpectrum { gap: f64 },

    #[error("singular system: gamma {gamma} does not exceed the principal eigenvalue {lambda}")]
    SingularSystem { gamma: f64, lambda: f64 },

    #[error("Krylov propagation failed: {0}")]
    Krylov(String),

    #[error("Newton iteration diverged after {iterations} steps (residual {residual:.3e}); try a larger radius or rho")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("profile has not decayed at the box boundary (value {value:.3e}); raise the radius")]
    ProfileTruncation { value: f64 },

    #[error("optimizer stalled after {iterations} iterations: {reason}")]
    OptimizerStall { iterations: usize, reason: String },

    #[error("tail truncation remainder {remainder:.3e} exceeds a tenth of epsilon {epsilon:.3e}; raise the shape radius")]
    TailTruncation { remainder: f64, epsilon: f64 },

    #[error("eigen-residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Residual { residual: f64, tol: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
