use std::fmt;

/// Errors produced by the library.
#[derive(Debug)]
pub enum Error {
    /// Tensor or kernel shapes are incompatible with the requested operation.
    Dimension(String),
    /// Input values violate a documented precondition (non-binary mask, out-of-range value).
    Validation(String),
    /// The API was called in an unsupported way (empty dataset, group of one image).
    Usage(String),
    /// A ground-truth mask has no foreground, so recall-bearing metrics are undefined.
    DegenerateMask,
    /// A file did not match the expected on-disk format.
    Format { offset: usize, message: String },
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Self::Validation(msg) => write!(f, "validation error: {msg}"),
            Self::Usage(msg) => write!(f, "usage error: {msg}"),
            Self::DegenerateMask => write!(f, "degenerate mask: ground truth has no foreground"),
            Self::Format { offset, message } => {
                write!(f, "format error at byte {offset}: {message}")
            }
            Self::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
