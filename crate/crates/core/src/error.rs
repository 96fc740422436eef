use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("epoch {epoch} is outside the schedule of {total} epochs")]
    OutOfRange { epoch: u32, total: u32 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at epoch {epoch} ({phase})")]
    NonFinite { epoch: u32, phase: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
