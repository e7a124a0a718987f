//! Experiment orchestration: configuration, resumable execution, the
//! append-only results store and report generation.

pub mod config;
pub mod report;
pub mod run;
pub mod store;

pub use config::{Analysis, ConfigError, ExperimentConfig};
pub use report::{generate_report, ReportError, ReportSummary};
pub use run::{prepare, run_experiment, run_with_gateway, Prepared, RunError, RunOptions, RunSummary};
pub use store::{ErrorRecord, RecordKey, ResultsStore, RunRecord};
