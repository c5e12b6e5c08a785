//! Batch experiment driver: TOML configs in, `results.json`, CSVs and a
//! manifest out.

pub mod config;
pub mod error;
pub mod experiments;
pub mod plot;
pub mod run;

pub use config::{load, parse, ExperimentConfig, ExperimentKind, LoadedConfig};
pub use error::{LabError, Result};
pub use run::{run, RunSummary};
