// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Bad shapes, out-of-range indices, or otherwise invalid inputs.
    InvalidArgument(String),
    /// Two intervention sets target the same head.
    Conflict(String),
    /// Data cannot support the requested fit (e.g. a probe with one class).
    DegenerateData(String),
    /// A non-finite value appeared during optimization.
    Divergence { param: String, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Conflict(m) => write!(f, "conflict: {m}"),
            Error::DegenerateData(m) => write!(f, "degenerate data: {m}"),
            Error::Divergence { param, detail } => {
                write!(f, "training diverged at parameter `{param}`: {detail}")
            }
        }
    }
}

impl core::error::Error for Error {}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidArgument(alloc::format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
