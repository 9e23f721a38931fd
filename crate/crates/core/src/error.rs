use alloc::string::String;
use core::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the training primitives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Error {
    /// Two operands (or an operand and a layer) have incompatible shapes.
    /// Both shapes are reported as `rows x cols`.
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A scalar argument is outside its documented domain.
    Domain(String),
    /// A textual spec (network string, learning-rate string, ...) failed to
    /// parse. `position` is the zero-based index of the offending field.
    Parse {
        what: &'static str,
        position: usize,
        message: String,
    },
    /// A batch or record violates the data contract (bad label, bad dimension).
    Data(String),
    /// An API was driven out of protocol, e.g. backward() with a stale
    /// forward cache.
    Contract(String),
    /// The requested conversion or export is not defined for this network.
    Unsupported(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => write!(
                f,
                "{op}: shape mismatch between {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Parse {
                what,
                position,
                message,
            } => {
                write!(f, "cannot parse {what} at field {position}: {message}")
            }
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Unsupported(msg) => write!(f, "unsupported: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
