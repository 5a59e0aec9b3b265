use alloc::string::String;

/// Errors raised by kernels, label generation, training and tracking.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(alloc::format!($($arg)*)) };
}
macro_rules! numeric_err {
    ($($arg:tt)*) => { $crate::error::Error::Numeric(alloc::format!($($arg)*)) };
}
pub(crate) use {numeric_err, shape_err, usage_err};
