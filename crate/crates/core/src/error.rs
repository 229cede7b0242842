use alloc::{string::String, vec::Vec};
use core::fmt;

/// Errors raised by the numeric kernels and the model loader.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible with the operation.
    Shape { op: &'static str, detail: String },
    /// A scalar argument is out of its valid range.
    InvalidParameter { name: &'static str, detail: String },
    /// Input data contained NaN or infinity.
    NonFinite { op: &'static str, index: usize },
    /// A required named parameter is absent from the store.
    MissingParam(String),
    /// A named parameter is present more than once.
    DuplicateParam(String),
    /// A named parameter has the wrong dimensions.
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    /// A pyramid level received a state of the wrong spatial size.
    PipelineOrder {
        level: usize,
        expected: usize,
        found: (usize, usize),
    },
    /// An API was called out of sequence.
    Usage(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(name: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: dimension mismatch: {detail}"),
            Error::InvalidParameter { name, detail } => {
                write!(f, "invalid parameter `{name}`: {detail}")
            }
            Error::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at flat index {index}")
            }
            Error::MissingParam(name) => write!(f, "missing parameter tensor `{name}`"),
            Error::DuplicateParam(name) => write!(f, "duplicate parameter tensor `{name}`"),
            Error::ParamShape {
                name,
                expected,
                found,
            } => write!(
                f,
                "parameter tensor `{name}` has dims {found:?}, expected {expected:?}"
            ),
            Error::PipelineOrder {
                level,
                expected,
                found,
            } => write!(
                f,
                "pyramid level {level} expects a {expected}x{expected} state, got {}x{}",
                found.0, found.1
            ),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
