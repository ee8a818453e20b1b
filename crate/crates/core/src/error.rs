use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("batch too small: {n} sample(s), need at least {min}")]
    BatchTooSmall { n: usize, min: usize },

    #[error("gradient tape does not match the network or batch it is applied to")]
    StaleTape,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("table grids do not match: {0}")]
    GridMismatch(String),

    #[error("dataset is already shifted ({shift}, severity {severity}); shifts do not stack")]
    AlreadyShifted { shift: String, severity: u8 },

    #[error("every configuration in the sweep grid diverged")]
    AllDiverged,

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
