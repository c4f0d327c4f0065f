use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes or layouts disagree with the backend contract.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{what} = {value} outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("perturbation budget violated: {0}")]
    Budget(String),
    /// A loss or gradient went NaN/Inf. `step` is the loop index where it happened.
    #[error("non-finite value in {what} at step {step}{detail}")]
    NonFinite {
        what: &'static str,
        step: usize,
        detail: String,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn non_finite(what: &'static str, step: usize) -> Self {
        Error::NonFinite {
            what,
            step,
            detail: String::new(),
        }
    }
}
