//! Dense-matrix numerics and the reverse-mode tape.

pub mod matrix;
pub mod tape;

pub use matrix::{frobenius_norm, leaky_relu, Matrix};
pub use tape::{Tape, Var};
