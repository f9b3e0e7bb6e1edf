use std::fmt;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, lengths or indices that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),
    /// Non-finite values or degenerate geometry (zero-norm vectors).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// API misuse, e.g. calling backward with a stale forward cache.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed input file.
    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },
    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Position inside a text (line) or binary (byte offset) file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Offset(u64),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Offset(o) => write!(f, "byte offset {o}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn structural(msg: impl Into<String>) -> Error {
    Error::Structural(msg.into())
}

pub(crate) fn numeric(msg: impl Into<String>) -> Error {
    Error::Numeric(msg.into())
}

pub(crate) fn parse_at_line(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        location: Location::Line(line),
        message: msg.into(),
    }
}
