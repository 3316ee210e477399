use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid parameter vector: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid weighting: {0}")]
    InvalidWeighting(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure at epoch {epoch}: {what}")]
    NumericFailure { epoch: usize, what: &'static str },

    #[error("numeric failure at t = {time}: {what}")]
    NumericFailureAt { time: f64, what: &'static str },

    #[error("singular innovation matrix at epoch {epoch} (condition estimate {condition:.3e})")]
    SingularInnovation { epoch: usize, condition: f64 },

    #[error("singular vectorized gain equation at epoch {epoch} (condition estimate {condition:.3e})")]
    SingularEquation { epoch: usize, condition: f64 },

    #[error("singular measurement noise density (condition estimate {condition:.3e})")]
    SingularNoise { condition: f64 },

    #[error("all {0} Monte-Carlo cases failed")]
    ExperimentFailed(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
