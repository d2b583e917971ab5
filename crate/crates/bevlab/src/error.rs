use thiserror::Error;

/// Error type shared across the crate. Each variant maps to a stable
/// machine-parsable class name used by the CLI exit path.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable one-word class for machine-parsable CLI output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Bounds(_) => "bounds",
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Numeric(_) => "numeric",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
