use std::fmt;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor shape mismatch (message names both offending shapes).
    Shape(String),
    /// Invalid configuration value.
    Config(String),
    /// Malformed text input, with the 1-based line it came from.
    Parse { line: usize, msg: String },
    /// A keyed lookup (feature id, vocab token, checkpoint name) failed.
    NotFound(String),
    /// Binary or JSON file violates its expected format.
    Format(String),
    /// Training stages invoked out of order.
    StageOrder(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::NotFound(m) => write!(f, "not found: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::StageOrder(m) => write!(f, "stage order error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
