//! Incremental training runs, evaluation, metrics files and reports.

pub mod config;
pub mod metrics;
pub mod report;
pub mod run;
pub mod train;

pub use config::{ExperimentConfig, Method};
pub use metrics::{miou, IouReport, MetricsRecord};
pub use report::compare_report;
pub use run::{configure_threads, run, run_experiment, RunOutput};
pub use train::{batch_objective, evaluate, train_step, StepPlan};
