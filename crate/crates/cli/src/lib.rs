//! Experiment runner: a TOML config describes a dataset and a
//! learner × strategy × seed grid; every grid cell trains, evaluates and
//! writes its results to its own directory, and `report` aggregates them.

pub mod config;
pub mod error;
pub mod grid;
pub mod report;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
