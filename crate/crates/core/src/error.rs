use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty point cloud: {0}")]
    EmptyCloud(&'static str),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("truncated buffer: {0}")]
    Truncated(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("box center outside the search region: {0}")]
    OutOfRegion(String),

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },

    #[error("no points in the search region")]
    EmptySearchRegion,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category, used by the command-line tool.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::InvalidArgument(_) | Error::OutOfRegion(_) => "invalid-input",
            Error::EmptyCloud(_) | Error::EmptySearchRegion => "empty-data",
            Error::BadMagic { .. } | Error::Truncated(_) | Error::Checkpoint(_) => "format",
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } => "numeric",
            Error::Io(_) => "io",
            Error::Json(_) | Error::Csv(_) => "parse",
        }
    }
}
