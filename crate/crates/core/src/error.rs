use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid direction: {0}")]
    InvalidDirection(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },

    #[error("{what}: size {size} exceeds budget {budget}")]
    BudgetExceeded { what: String, size: u128, budget: u128 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("ellipticity violated at {site}: {reason}")]
    Ellipticity { site: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn spec(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidSpec {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
