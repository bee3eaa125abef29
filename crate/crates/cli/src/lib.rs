//! Command-line front end: JSON configuration over committed defaults,
//! validation, experiment runs and CSV outputs with a manifest.

pub mod config;
pub mod run;
pub mod validate;

pub use config::RunConfig;
pub use run::{execute, load, run, suite_config, Experiment, RunError, RunSummary};
pub use validate::validate;
