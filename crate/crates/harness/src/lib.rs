//! Experiment harness: sweep orchestration, box-plot statistics, and report
//! emission for the adapter training scheme, plus the `adapterbench` CLI.

pub mod config;
pub mod report;
pub mod runner;
pub mod stats;
pub mod sweeps;

pub use adapterbench_core as core;
pub use config::{Mode, RunConfig, SweepAxis, SweepSpec};
pub use report::{emit_report, ReportFormat, SweepReport};
pub use stats::DistributionSummary;
