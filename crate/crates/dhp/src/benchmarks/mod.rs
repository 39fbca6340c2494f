//! Dataset ingestion and continual-learning task streams.

pub mod idx;
pub mod synth;
pub mod tasks;

pub use idx::{load_idx, Dataset};
pub use tasks::{
    make_imbalanced_permuted_tasks, make_permuted_tasks, make_split_tasks, TaskSpec, TaskStream,
};
