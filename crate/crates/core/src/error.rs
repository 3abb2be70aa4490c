use std::fmt;

/// Crate-wide error type.
///
/// Variants correspond to the failure classes the operations can hit:
/// inconsistent shapes, invalid configuration, bad or empty data, numeric
/// breakdown, and I/O while reading or writing artifacts.
#[derive(Debug)]
pub enum Error {
    /// A dimension is non-positive or two shapes disagree.
    InvalidDim(String),
    /// A configuration value violates its constraints.
    InvalidConfig(String),
    /// Input data is malformed, empty, out of range or inconsistent.
    InvalidData(String),
    /// A computation produced or would produce non-finite values.
    Numeric(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidDim(msg) => write!(f, "invalid dimension: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::InvalidData(msg) => write!(f, "invalid data: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
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
        Error::Json(e)
    }
}
