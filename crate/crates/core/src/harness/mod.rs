//! Experiment configs, multi-seed suites, baseline budgets and reports.
//!
//! A suite directory holds `budgets.json`, `report.json`, `report.csv` and
//! one `<method>/<seed>/{history.csv,run.json}` pair per job.

mod config;
mod suite;

pub use config::{BuiltEnv, EnvConfig, ExperimentConfig};
pub use suite::{
    ablate_frontier, aggregate, build_id, derive_budgets, load_report, noise_sweep, render_report, run_suite, run_suite_with,
    AblationReport, BaselineSummary, BudgetFile, NoisePoint, RunOptions, RunRecord, SuiteOutcome,
};
