//! Experiment runner for domain-aware contrastive knowledge transfer on
//! multi-domain imbalanced benchmarks: config parsing, run/sweep/validate
//! commands, and report artifacts.

pub mod config;
pub mod runner;

pub use config::{ExperimentConfig, Preset};
pub use runner::{run, sweep, validate, RunnerError};
