use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver diverged at step {step}: {reason}")]
    SolverDiverged { step: usize, reason: String },

    #[error("non-finite objective term `{term}`")]
    NonFiniteObjective { term: &'static str },

    #[error("grid file format error in field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("grid file truncated: header declares {expected} values, payload holds {found}")]
    Truncated { expected: usize, found: usize },

    #[error("metric unavailable: {0}")]
    MetricUnavailable(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
