//! Harness around `stream-ttt-core`: JSON experiment configs, stream and
//! checkpoint files, parallel orchestration of independent runs, and CSV/JSON
//! report bundles.

pub mod config;
pub mod error;
pub mod execute;
pub mod formats;
pub mod report;

pub use config::{parse_config, ExperimentConfig, Mode};
pub use error::{CliError, Result};
pub use execute::{execute, ReportBundle, RunOptions};
pub use report::report_figures;

/// Environment variable consulted for the master seed when neither `--seed`
/// nor the config provides one.
pub const SEED_ENV: &str = "STREAM_TTT_SEED";
