//! Experiment runner for `whvi`: TOML configs, multi-seed training runs,
//! JSON checkpoints, parameter tables and a transform benchmark.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod report;
pub mod run;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint, CheckpointError};
pub use config::{ConfigError, ExperimentConfig, ModelKind};
pub use report::{param_report, ParamReport, ParamRow};
pub use run::{run, CliError, RunOptions, RunOutcome};
