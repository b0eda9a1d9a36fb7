use thiserror::Error;

/// Errors raised by tensor construction, graph operations and checkpoint IO.
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (mismatched shapes, non-scalar loss, out-of-range labels, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate variance: batch norm in train mode needs at least 2 values per channel, got {0}")]
    DegenerateVariance(usize),

    #[error("non-finite gradient in parameter `{name}` (element {index}: {value})")]
    NonFiniteGradient { name: String, index: usize, value: f64 },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
