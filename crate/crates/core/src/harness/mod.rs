//! Configuration, experiment runs, metrics, baselines, and persistence.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod experiment;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use compare::{compare, ComparisonTable, CSV_HEADER};
pub use config::{ExperimentConfig, Strategy};
pub use experiment::{run_experiment, run_experiment_with, RunReport};
