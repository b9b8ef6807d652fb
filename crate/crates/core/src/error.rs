use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("rank-deficient design: {null_directions} null direction(s) with ridge = 0")]
    RankDeficient { null_directions: usize },

    #[error("factorization failed at ridge {ridge:e}")]
    Factorization { ridge: f64 },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("regression failed at iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("deployment protocol violated: {0}")]
    Protocol(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Argument(_) => "argument",
            Error::Unsupported(_) => "unsupported",
            Error::Coverage(_) => "coverage",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Factorization { .. } => "factorization",
            Error::Divergence { .. } => "divergence",
            Error::Iteration { .. } => "iteration",
            Error::Protocol(_) => "protocol",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
