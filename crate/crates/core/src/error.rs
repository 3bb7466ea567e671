use alloc::string::String;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Arguments violate a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// A computation produced a non-finite or degenerate value.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A training loop diverged.
    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: u64, reason: String },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(alloc::format!($($arg)*))
    };
}

macro_rules! numeric_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Numeric(alloc::format!($($arg)*))
    };
}

pub(crate) use input_err;
pub(crate) use numeric_err;
