use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("channel `{0}` has zero variance")]
    DegenerateChannel(&'static str),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("search failed: {0}")]
    Search(String),

    #[error("{0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::DegenerateChannel(_)
            | Error::Csv(_)
            | Error::Io(_) => 3,
            Error::UndefinedMetric(_) => 4,
            Error::Shape(_) | Error::Search(_) | Error::Internal(_) => 5,
        }
    }
}
