use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("validation error ({context}): {msg}")]
    Validation { context: String, msg: String },

    #[error("study {study_id}: degenerate cell (zero count) with continuity correction 0")]
    DegenerateCell { study_id: String },

    #[error("study {study_id}: needs at least 2 arms for contrast-based analysis, has {arms}")]
    InsufficientArms { study_id: String, arms: usize },

    #[error("knot placement: {0}")]
    Knots(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance matrix for study {study_id} is not positive definite")]
    Covariance { study_id: String },

    #[error("model configuration: {0}")]
    Config(String),

    #[error("sampler initialization failed: no finite-posterior state found in {attempts} attempts")]
    InitFailure { attempts: usize },

    #[error("diagnostics: {0}")]
    Diagnostics(String),

    #[error("one-stage fit: {0}")]
    OneStage(String),

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(context: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            context: context.into(),
            msg: msg.into(),
        }
    }
}
