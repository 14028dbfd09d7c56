//! Experiment harness: configuration, run directories, CSV metrics, sweeps
//! and checkpoint inspection.

pub mod config;
pub mod error;
pub mod experiment;
pub mod inspect;
pub mod metrics;
pub mod sweep;

pub use config::{ExperimentSpec, SpecBuilder};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, RunOptions, RunOutcome};
pub use metrics::time_to_target;
