//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Construction-time parameter validation failed.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Dimensions of an argument do not match the system.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Newton iteration did not reach the requested tolerance.
    #[error("Newton did not converge{}: scaled residual {residual:.3e} after {iterations} iterations", context_suffix(.context))]
    NewtonFailure {
        residual: f64,
        iterations: usize,
        context: String,
    },

    /// The iteration or constraint matrix is singular (or numerically so).
    #[error("singular matrix in {0}")]
    SingularMatrix(String),

    /// The fast-time derivative of the pinned component vanishes at the line
    /// carrying the phase condition, so the hidden constraint cannot be
    /// solved for the local frequency.
    #[error("phase condition degenerate: |{what}| = {value:.3e} below tolerance {tol:.3e}")]
    ConditionOneViolated { what: String, value: f64, tol: f64 },

    /// Every variable entering the optimisation is constant along the fast
    /// time scale, so the closing equation does not determine the local
    /// frequency.
    #[error("optimisation condition degenerate: frequency coefficient {value:.3e} below tolerance {tol:.3e}")]
    ConditionTwoViolated { value: f64, tol: f64 },

    /// Transient integration did not settle into a periodic regime.
    #[error("no periodic regime detected within {steps} steps ({periods} period estimates)")]
    NoPeriodicRegime { steps: usize, periods: usize },

    /// A state handed to an operation does not satisfy the system equations.
    #[error("inconsistent point: scaled residual {residual:.3e} exceeds {tol:.3e}")]
    InconsistentPoint { residual: f64, tol: f64 },

    /// Comparison of series defined on different grids.
    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    /// The operation requires a model property the given model lacks.
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    /// Failure while reading or parsing an input file.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Linalg(#[from] ndarray_linalg::error::LinalgError),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}
