use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("integration failed at t = {last_time}: {reason}")]
    Integration { last_time: f64, reason: String },

    #[error("rank-deficient least-squares fit (condition estimate {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("time {t} outside data range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("unknown nonlinearity `{0}`")]
    UnknownNonlinearity(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed csv {path}: {reason}")]
    Csv { path: String, reason: String },
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
