use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or lengths do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A hyperparameter or argument is out of its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(alloc::format!($($arg)*))
    };
}

macro_rules! param_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Parameter(alloc::format!($($arg)*))
    };
}

pub(crate) use param_err;
pub(crate) use shape_err;
