//! Evaluation matrix and the ACC / BWT summary metrics.

use serde::{Deserialize, Serialize};

/// Lower-triangular accuracy record: `row(T)[i]` is test accuracy on task
/// i+1 after finishing task T+1 (0-based storage, 1-based protocol).
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct EvalMatrix {
    rows: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn new() -> Self {
        EvalMatrix::default()
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.rows.len() + 1, "row T must have T entries");
        assert!(row.iter().all(|a| (0.0..=1.0).contains(a)));
        self.rows.push(row);
    }

    pub fn tasks_done(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.rows[t - 1]
    }

    pub fn accuracy(&self, after_task: usize, on_task: usize) -> f64 {
        self.rows[after_task - 1][on_task - 1]
    }

    /// Mean accuracy over all seen tasks after finishing task `t`.
    pub fn avg_acc(&self, t: usize) -> f64 {
        let row = self.row(t);
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Backward transfer after task `t`: mean over earlier tasks of
    /// (final accuracy - just-learned accuracy). Undefined for t < 2.
    pub fn bwt(&self, t: usize) -> Option<f64> {
        if t < 2 {
            return None;
        }
        let total: f64 = (1..t)
            .map(|i| self.accuracy(t, i) - self.accuracy(i, i))
            .sum();
        Some(total / (t - 1) as f64)
    }
}

/// Mean and standard error of the mean (sample std, n-1 denominator).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0);
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
