use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// A loss or objective became non-finite.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("unsupported architecture: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            Error::Io(_) => 1,
            _ => 2,
        }
    }
}
