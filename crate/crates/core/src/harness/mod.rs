//! Run configuration, AdamW, training and evaluation loops, experiment
//! suites and CSV reports.

pub mod config;
pub mod optim;
pub mod suite;
pub mod train;

pub use config::{RunConfig, Schedule, Task, SEED_ENV};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamW};
pub use suite::{
    emit_report, merge_reports, parse_report, render_csv, rows_to_records, run_experiment_suite,
    suite_variants, ExperimentRow, ReportRecord, Suite, CSV_HEADER,
};
pub use train::{
    evaluate, evaluate_logits, evaluate_similarity, reverse_pair_accuracy, train, train_model,
    Evaluation, RunData, RunFeatures, TrainOutput,
};
