//! Configuration, pipeline orchestration and report emission for `srb-lab`.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunOptions, RunOutcome, Summary};
pub use report::{emit_report, ReportFormat};
