//! Experiment runner for the Koopman eigenfunction pipeline: configs,
//! staged execution, artifacts and parameter sweeps.

pub mod config;
pub mod export;
pub mod pipeline;
pub mod sweep;

pub use config::{ExperimentConfig, SweepAxis};
pub use pipeline::{run, RunOutput, Stage, StageError};
pub use sweep::{sweep, SweepTable};
