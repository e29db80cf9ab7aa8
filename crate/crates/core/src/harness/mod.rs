//! Experiment configuration, orchestration and reporting.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig, Job, MethodConfig};
pub use report::{ReportRow, HEADER};
pub use runner::{run_experiment, workers_from_env, RunSummary, WORKERS_ENV};
