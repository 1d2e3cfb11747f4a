use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite vehicle state at step {step}")]
    NonFiniteState { step: u64 },

    #[error("estimator covariance lost positive definiteness at step {step}")]
    CovarianceNotPd { step: i64 },

    #[error("innovation covariance is singular (sensor {sensor_id}, stamp {stamp})")]
    SingularInnovation { sensor_id: u32, stamp: f64 },

    #[error("stacked noise covariance is not positive definite")]
    StackedCovarianceNotPd,

    #[error("invalid false-alarm level {0}; expected 0 < alpha < 1")]
    InvalidAlpha(f64),

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("attack calibration failed: {0}")]
    Calibration(String),

    #[error("duplicate event (class {class}, sensor {sensor_id}, seq {seq})")]
    DuplicateEvent { class: u8, sensor_id: u32, seq: u64 },

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            context: path.into(),
            source,
        }
    }

    /// Config problems map to exit code 1, everything else to 2.
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_) | SimError::InvalidAlpha(_))
    }
}

pub type Result<T> = std::result::Result<T, SimError>;
