use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("temperature {celsius} °C outside model validity range [{min}, {max}] °C")]
    TemperatureOutOfRange { celsius: f64, min: f64, max: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("unknown parameter key `{0}`")]
    UnknownKey(String),

    #[error("root finder did not converge after {iterations} iterations (best residual {best_residual:e} A)")]
    NoConvergence { iterations: usize, best_residual: f64 },

    #[error("no sign change of node balance on [{lo}, {hi}] V (f(lo) = {f_lo:e}, f(hi) = {f_hi:e})")]
    NoBracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("transient integrator step underflow at t = {t:e} s (step {step:e} s)")]
    StepUnderflow { t: f64, step: f64 },

    #[error("operand length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("calibration residual {residual:.4} exceeds gate {gate:.4}")]
    CalibrationFailed { residual: f64, gate: f64 },

    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn format(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for numerical solver failures (as opposed to usage/config errors).
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. } | Error::NoBracket { .. } | Error::StepUnderflow { .. }
        )
    }
}
