//! Command-line plumbing for the forecasting pipeline: run configuration,
//! per-stage commands with on-disk artifacts, and the end-to-end run.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod stages;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use stages::{
    cmd_align, cmd_backtest, cmd_decompose, cmd_denoise, cmd_predict, cmd_run_all, cmd_synth, cmd_train, Report,
};
