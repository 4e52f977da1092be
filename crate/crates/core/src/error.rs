use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch, out-of-range position, invalid configuration value.
    #[error("domain error: {0}")]
    Domain(String),
    /// Non-finite intermediate, zero normalizer, overflow.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse, e.g. consuming a gradient tape twice.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed configuration document; `path` locates the offending key.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    /// Malformed checkpoint or CSV payload.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}

pub(crate) fn numeric<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numeric(msg.into()))
}
