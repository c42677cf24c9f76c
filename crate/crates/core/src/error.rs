use thiserror::Error;

/// Errors produced by the numerical laboratory.
#[derive(Debug, Error)]
pub enum RwreError {
    #[error("ball with {sites} sites exceeds the exact-method cap of {cap}")]
    BallTooLarge { sites: usize, cap: usize },

    #[error("site {site} lies outside the closed ball of radius {radius}")]
    OutsideBall { site: String, radius: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{censored} of {total} walks exceeded the step cap of {cap}")]
    CapExceeded {
        censored: usize,
        total: usize,
        cap: u64,
    },

    #[error(
        "linear solver did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    SolverDivergence { residual: f64, iterations: usize },

    #[error("series does not converge: tail stopped decreasing at order {order}")]
    NonConvergence { order: usize },

    #[error("scale guard: {0}")]
    ScaleGuard(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("memory cap exceeded: {requested} bytes requested, cap {cap}")]
    MemoryCap { requested: usize, cap: usize },

    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RwreError {
    /// Numerical failures (as opposed to validation failures) map to a distinct
    /// process exit code in the command-line driver.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            RwreError::SolverDivergence { .. }
                | RwreError::NonConvergence { .. }
                | RwreError::CapExceeded { .. }
                | RwreError::BudgetExhausted(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, RwreError>;
