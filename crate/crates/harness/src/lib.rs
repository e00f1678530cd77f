//! Command-line harness for slimmable mutual-learning networks: experiment
//! configs, datasets, artifact persistence, end-to-end runs and reports.

pub mod artifacts;
pub mod config;
pub mod dataset;
pub mod desk;
pub mod error;
pub mod experiment;
pub mod report;

pub use config::{ExperimentConfig, TrainMode};
pub use error::{HarnessError, Result};
pub use experiment::{run_experiment, RunArtifacts};
