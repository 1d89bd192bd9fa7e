use alloc::string::String;
use core::fmt;

/// Error taxonomy shared across the engine.
///
/// Variants map onto stable process exit codes in the CLI crate:
/// configuration problems exit 2, I/O problems 3, numeric aborts 4.
#[derive(Debug, Clone, PartialEq)]
pub enum GtoError {
    /// Incompatible tensor or index shapes.
    Dim(String),
    /// Invalid configuration value (ratio out of range, odd width, ...).
    Config(String),
    /// An index referenced something out of range.
    Index(String),
    /// Non-finite values or a failed numeric procedure.
    Numeric(String),
    /// API misuse (backward twice, missing statistics, mode mismatch).
    Usage(String),
    /// A data structure failed its invariants.
    Validation(String),
    /// A merge found a node no partition predicted.
    Coverage(String),
}

impl fmt::Display for GtoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GtoError::Dim(m) => write!(f, "dimension error: {m}"),
            GtoError::Config(m) => write!(f, "config error: {m}"),
            GtoError::Index(m) => write!(f, "index error: {m}"),
            GtoError::Numeric(m) => write!(f, "numeric error: {m}"),
            GtoError::Usage(m) => write!(f, "usage error: {m}"),
            GtoError::Validation(m) => write!(f, "validation error: {m}"),
            GtoError::Coverage(m) => write!(f, "coverage error: {m}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for GtoError {}

pub type Result<T> = core::result::Result<T, GtoError>;

macro_rules! err {
    ($variant:ident, $($arg:tt)*) => {
        $crate::error::GtoError::$variant(alloc::format!($($arg)*))
    };
}
pub(crate) use err;
