//! Error taxonomy shared by the library and the command-line front end.
//!
//! Variants map onto process exit codes: configuration, data and resource
//! errors are operator mistakes (exit 1), verification failures are honest
//! "the check did not pass" outcomes (exit 2), and numerical errors are
//! conditions the guards are supposed to make unreachable (exit 1).

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration: bad scenario keys, out-of-range parameters,
    /// mismatched dimensions, splits off the time grid.
    Config(String),
    /// Malformed input data: CSV rows that do not parse, fields that violate
    /// adaptedness, incomplete coefficient tables.
    Data(String),
    /// A guard refused to allocate: tree too deep, dense map too large.
    Resource(String),
    /// Numerical breakdown that the preconditions should exclude: singular
    /// implicit system, non-convergent iteration with no fallback.
    Numerical(String),
    /// A verification identity exceeded its tolerance.
    Verification(String),
    /// Underlying I/O failure, tagged with the path involved.
    Io(String),
}

impl Error {
    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Resource(msg) => write!(f, "resource guard: {msg}"),
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::Verification(msg) => write!(f, "verification failure: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}
