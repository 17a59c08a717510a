//! Error type shared by every module of the crate.

use std::fmt;

/// Everything that can go wrong in the retrieval pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    Dimension(String),
    /// An argument is outside the operation's domain (empty input, K out of range, ...).
    Argument(String),
    /// A vector whose norm is too small to normalize, usually a collapsed encoder.
    DegenerateVector { row: usize, norm: f64 },
    /// A forward evaluation produced a non-finite value.
    Evaluation(String),
    /// Invalid configuration value.
    Config { field: String, message: String },
    /// Malformed binary cache file.
    Format { offset: u64, message: String },
    /// Inconsistent data (missing ground truth, unknown ids, ...).
    Data(String),
    /// Training produced a non-finite loss or gradient.
    Divergence { iteration: usize, what: String },
    /// Underlying I/O failure.
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format { offset, message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::DegenerateVector { row, norm } => {
                write!(f, "degenerate vector at row {row} (norm {norm:e}); encoder may have collapsed")
            }
            Error::Evaluation(m) => write!(f, "evaluation error: {m}"),
            Error::Config { field, message } => write!(f, "configuration error in `{field}`: {message}"),
            Error::Format { offset, message } => write!(f, "format error at byte {offset}: {message}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Divergence { iteration, what } => {
                write!(f, "training diverged at iteration {iteration}: {what}")
            }
            Error::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
