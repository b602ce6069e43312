use alloc::boxed::Box;
use alloc::string::String;

use crate::nn::ParamSet;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: expected {expected} elements, got {actual}")]
    InvalidShape { expected: usize, actual: usize },

    #[error("signal has zero energy and cannot be power-normalized")]
    DegenerateSignal,

    #[error("non-finite value encountered in {0}")]
    NumericalError(&'static str),

    #[error("channel coefficient is zero with zero noise variance at symbol {0}")]
    SingularChannel(usize),

    #[error("{stage} training diverged at epoch {epoch}")]
    TrainingDiverged {
        stage: &'static str,
        epoch: usize,
        /// Parameters from the last epoch that finished with a finite loss.
        last_good: Option<Box<ParamSet>>,
    },

    #[error("attack optimization diverged after restart")]
    AttackDiverged,

    #[error("identity model accuracy {accuracy:.3} is below the required {required:.3}")]
    GateNotMet { accuracy: f64, required: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}
