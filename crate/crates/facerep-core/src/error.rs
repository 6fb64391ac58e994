use alloc::string::String;
use core::fmt;

/// Error kinds shared by the core modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor extents do not line up (kernel/channel/dimension mismatch).
    Shape(String),
    /// An argument is outside its legal range.
    Argument(String),
    /// Input geometry incompatible with the requested execution.
    Geometry(String),
    /// A layer stack or weight store fails validation.
    Validation(String),
    /// Training data cannot support the requested fit (e.g. single class).
    DegenerateData(String),
    /// Malformed or non-finite data values.
    Data(String),
    /// An operation was invoked without the required cached state.
    State(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::Geometry(m) => write!(f, "geometry error: {m}"),
            Error::Validation(m) => write!(f, "validation error: {m}"),
            Error::DegenerateData(m) => write!(f, "degenerate data: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::State(m) => write!(f, "state error: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
