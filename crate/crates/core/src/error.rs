use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("corrupt or truncated header: {0}")]
    CorruptHeader(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token grid contains MASK entries")]
    MaskedGrid,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the command-line exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::Config,
            Error::Numerical(_) | Error::DegenerateSignal(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        match e {
            // hound reports short reads as `Other` ("Failed to read enough bytes")
            hound::Error::IoError(io)
                if matches!(io.kind(), std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::Other) =>
            {
                Error::CorruptHeader(io.to_string())
            }
            hound::Error::IoError(io) => Error::Io(io),
            hound::Error::FormatError(msg) => Error::CorruptHeader(msg.to_string()),
            hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported wav format".into()),
            other => Error::UnsupportedEncoding(other.to_string()),
        }
    }
}
