use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of a geometric or physical map.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed event stream. `offset` is the byte offset (binary) or the
    /// 1-based line number (CSV) of the offending record.
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("time-walk calibration: {0}")]
    Calibration(String),

    #[error("band profile fit failed: {message} (rms residual {residual_rms:.4})")]
    Fit { message: String, residual_rms: f64 },

    #[error("analysis: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
