//! Command line, configuration, on-disk formats and experiment
//! orchestration around `mome-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod report;

pub use commands::Lab;
pub use config::ExperimentConfig;
pub use error::{LabError, Result};
