use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad data: {0}")]
    Data(String),

    #[error("series too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("measurement system unobservable: {0}")]
    Unobservable(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code class for the CLI: 2 for data/model problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::NoConvergence(_) => 3,
            _ => 2,
        }
    }
}
