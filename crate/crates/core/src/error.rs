use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch { op: &'static str, expected: String, found: String },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e}, max {max_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64, max_eigenvalue: f64 },

    #[error("eigenvalue decomposition failed to converge in {0}")]
    EigenFailure(&'static str),

    #[error("linear solve failed in {0}: matrix is singular")]
    Singular(&'static str),

    #[error("non-convergent after {iterations} iterations (residual {residual:e}): system likely not stabilizable or tolerance too tight")]
    NonConvergent { iterations: usize, residual: f64 },

    #[error("closed loop is unstable (spectral radius {spectral_radius})")]
    UnstableClosedLoop { spectral_radius: f64 },

    #[error("terminal weight must dominate P*")]
    TerminalNotDominant,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("iterate became non-finite at stage {stage}, iteration {iteration}")]
    NonFinite { stage: usize, iteration: u64 },

    #[error("stage {stage} plans {planned:e} oracle calls, above the budget of {budget}")]
    BudgetExceeded { stage: usize, planned: f64, budget: u64 },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
