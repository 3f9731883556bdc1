//! Configuration-driven experiment runner for the stabilization toolkit.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod stages;

pub use config::{load_config, ConfigError, ExperimentConfig};
pub use stages::{run_all, run_command, CliError, Stage, StageOutcome};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CHECK_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const RUNTIME: i32 = 3;
}
