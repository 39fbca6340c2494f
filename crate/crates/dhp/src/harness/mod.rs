//! Experiment harness: configs, training loop, metrics, persistence.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{BenchmarkId, MethodId, RunConfig};
pub use metrics::{mean_sem, EvalMatrix};
pub use train::{
    build_model, build_task_stream, consolidate_after_task, evaluate_row, evaluate_task,
    load_benchmark_data, run_experiment, run_trial, train_task, DiagEntry, RunMetrics, RunRecord,
    RunSummary,
};
