//! Experiment harness for the semcloak simulator: configuration, checkpoints, image
//! folders, the evaluation grid and report emission.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod record;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use harness::{replay, run_experiment, Run};
pub use record::{AttackKind, ExperimentRecord};
