//! Experiment runner for the edge provisioning simulator: reads a TOML
//! experiment file, expands its parameter sweep and writes per-slot and
//! summary CSVs.

pub mod config;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, ExperimentSpec, SweepAxis};
pub use runner::{run_experiments, threads_from_env, Report, RunError};
