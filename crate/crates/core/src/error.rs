use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),

    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    #[error("estimator window of {0} samples is too short (need at least 16)")]
    WindowTooShort(usize),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("no power commanded")]
    NoPowerCommanded,

    #[error("string voltage insufficient: inverter-1 amplitude would be {0:.3} V")]
    StringVoltageInsufficient(f64),

    #[error("steady-state iteration did not converge (residual {residual:.3e} after {iterations} iterations)")]
    NoConvergence { residual: f64, iterations: usize },

    #[error("non-finite state at step {step} ({channel})")]
    NanAbort { step: usize, channel: &'static str },

    #[error("steady-state window of {periods:.2} fundamental periods is shorter than 2")]
    WindowTooShortForMetrics { periods: f64 },
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { field: field.into(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
