//! Experiment driver for the augmented subspace eigensolver: configuration,
//! problem construction, mode execution and reports.

pub mod config;
pub mod pencil_io;
pub mod run;

pub use config::{parse_config, ConfigError, ConfigWarning, Mode, RawConfig, RunConfig};
pub use pencil_io::{export_pencil, load_pencil};
pub use run::{load_run_config, run, Overrides, RunError, RunOutcome, Summary};
