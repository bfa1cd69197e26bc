use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty configuration")]
    EmptyConfiguration,
    #[error("empty effective domain: every value is +inf")]
    EmptyEffectiveDomain,
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),
    #[error("point {point:?} lies outside the domain {domain}")]
    OutOfDomain { point: Vec<f64>, domain: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("matrix of size {0} is too large for brute-force enumeration; use hungarian")]
    UseHungarian(usize),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("unequal atom counts ({0} vs {1}); use kantorovich_lp")]
    UnequalAtoms(usize, usize),
    #[error("infeasible transport problem: source mass {source_mass} != target mass {target_mass}")]
    MassMismatch { source_mass: f64, target_mass: f64 },
    #[error("enumeration budget exceeded: need {needed}, limit {limit}")]
    BudgetExceeded { needed: u128, limit: u128 },
    #[error("grid with {cells} cells exceeds the limit of {limit}; use a coarser grid")]
    ResolutionOverflow { cells: usize, limit: usize },
    #[error("solver did not converge after {iterations} iterations (last residual {last_residual:e})")]
    NotConverged {
        iterations: usize,
        last_residual: f64,
        residual_trace: Vec<f64>,
    },
    #[error("the master equation has not been solved yet")]
    SolverNotRun,
    #[error("unknown experiment `{name}`; registered: {known}")]
    UnknownExperiment { name: String, known: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
