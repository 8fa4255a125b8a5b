//! Batch pipeline over a single config file: zone measurement, oracle
//! demonstrations, IRT fitting and zone prediction, selective-ICL policy
//! search, curriculum schedules and loss-dynamics summaries.

pub mod commands;
pub mod config;

pub use commands::{run, Command, Context, StageError};
pub use config::{Overrides, PipelineConfig};
