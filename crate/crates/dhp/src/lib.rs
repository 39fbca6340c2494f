//! Continual learning with a differentiable Hebbian plasticity softmax
//! layer and synaptic consolidation (Online EWC, SI, MAS), together with
//! the Permuted / Imbalanced-Permuted / Split MNIST benchmark harness.

pub mod benchmarks;
pub mod consolidation;
pub mod error;
pub mod harness;
pub mod layer;
pub mod model;
pub mod ndcore;
pub mod seeding;

pub use error::{Error, Result};
