//! Differentiable Hebbian plasticity softmax layer.
//!
//! The output weights are a sum of two components: slow weights `theta`
//! trained by SGD, and a plastic component `alpha * hebb` where `hebb` is a
//! per-connection trace of class-conditional mean hidden activations and
//! `alpha` scales its contribution. A single learned scalar `eta` sets both
//! how fast traces acquire new activity and how fast old trace content
//! decays.
//!
//! Traces are state, not parameters: the optimizer never steps them, they
//! are zeroed once at the start of the first task and never reset between
//! tasks, and evaluation uses the most recent traces without updating them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HebbGradMode {
    /// Per-class means are treated as constants in the trace update; the
    /// backbone only trains through the direct forward path.
    #[default]
    DetachMeans,
    /// Gradient also flows from the trace update back into the hidden
    /// activations. Kept for ablation.
    Full,
}

#[derive(Clone, Debug)]
pub struct DhpSoftmaxLayer {
    pub theta: Matrix,
    pub alpha: Matrix,
    pub eta: f64,
    pub hebb: Matrix,
    pub grad_mode: HebbGradMode,
}

/// Group batch rows by label in first-occurrence order.
///
/// Deterministic grouping keeps trace updates bit-reproducible.
pub fn group_by_class(labels: &[usize], dim: usize) -> Result<Vec<(usize, Vec<usize>)>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (row, &y) in labels.iter().enumerate() {
        if y >= dim {
            return Err(Error::LabelOutOfRange { label: y, dim });
        }
        match groups.iter_mut().find(|(c, _)| *c == y) {
            Some((_, rows)) => rows.push(row),
            None => groups.push((y, vec![row])),
        }
    }
    Ok(groups)
}

impl DhpSoftmaxLayer {
    pub fn init(m: usize, d: usize, eta0: f64, rng: &mut impl Rng) -> Self {
        assert!(m > 0 && d > 0);
        let bound = (6.0 / (m + d) as f64).sqrt();
        let theta = Matrix::from_fn(m, d, |_, _| rng.gen_range(-bound..bound));
        let alpha = Matrix::from_fn(m, d, |_, _| rng.gen_range(-0.01..0.01));
        DhpSoftmaxLayer {
            theta,
            alpha,
            eta: eta0,
            hebb: Matrix::zeros(m, d),
            grad_mode: HebbGradMode::default(),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.theta.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.theta.cols()
    }

    /// Effective output weights `theta + alpha .* hebb`.
    pub fn effective_weights(&self) -> Matrix {
        self.theta
            .add(&self.alpha.hadamard(&self.hebb).unwrap())
            .unwrap()
    }

    /// In-place batched trace update: for each class c present in the batch,
    /// `hebb[:,c] <- (1-eta) hebb[:,c] + eta * mean(h rows with label c)`.
    /// Columns of absent classes are untouched. An empty batch is a no-op.
    pub fn hebb_batch_update(&mut self, h: &Matrix, labels: &[usize]) -> Result<()> {
        if labels.is_empty() {
            return Ok(());
        }
        assert_eq!(h.rows(), labels.len(), "batch size mismatch");
        assert_eq!(h.cols(), self.hidden_width(), "hidden width mismatch");
        let groups = group_by_class(labels, self.output_dim())?;
        for (c, rows) in groups {
            let s = rows.len() as f64;
            for i in 0..self.hidden_width() {
                let mut mean = 0.0;
                for &r in &rows {
                    mean += h.get(r, i);
                }
                mean /= s;
                let v = (1.0 - self.eta) * self.hebb.get(i, c) + self.eta * mean;
                self.hebb.set(i, c, v);
            }
        }
        Ok(())
    }

    /// Evaluation-mode pre-activations `z = h (theta + alpha .* hebb)`.
    /// Pure: never touches the traces.
    pub fn forward_eval(&self, h: &Matrix) -> Matrix {
        h.matmul(&self.effective_weights()).unwrap()
    }

    /// Training-mode forward on a tape: update traces first (Algorithm
    /// order), then compute pre-activations from the updated traces.
    ///
    /// `theta_var`/`alpha_var`/`eta_var` are the tape leaves for this
    /// layer's parameters; `h_var` holds the (B x m) hidden batch. Returns
    /// the pre-activation node and the updated-trace node; the caller
    /// commits the latter's value into `self.hebb` after the step.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        h_var: Var,
        theta_var: Var,
        alpha_var: Var,
        eta_var: Var,
        labels: &[usize],
    ) -> Result<(Var, Var)> {
        let groups = group_by_class(labels, self.output_dim())?;
        let classes: Vec<usize> = groups.iter().map(|(c, _)| *c).collect();
        let means = tape.class_mean(h_var, groups);
        let means = match self.grad_mode {
            HebbGradMode::DetachMeans => tape.detach(means),
            HebbGradMode::Full => means,
        };
        let hebb_new = tape.hebb_update(self.hebb.clone(), means, eta_var, classes);
        let fast = tape.mul(alpha_var, hebb_new)?;
        let weights = tape.add(theta_var, fast)?;
        let z = tape.matmul(h_var, weights)?;
        Ok((z, hebb_new))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;

    fn layer(m: usize, d: usize, eta: f64) -> DhpSoftmaxLayer {
        DhpSoftmaxLayer {
            theta: Matrix::zeros(m, d),
            alpha: Matrix::zeros(m, d),
            eta,
            hebb: Matrix::zeros(m, d),
            grad_mode: HebbGradMode::default(),
        }
    }

    /// Sample-by-sample reference: group per class, apply the decayed
    /// update once per class.
    fn reference_update(hebb: &mut Matrix, h: &Matrix, labels: &[usize], eta: f64) {
        let mut seen: Vec<usize> = Vec::new();
        for &y in labels {
            if !seen.contains(&y) {
                seen.push(y);
            }
        }
        for c in seen {
            let rows: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l == c)
                .map(|(r, _)| r)
                .collect();
            for i in 0..hebb.rows() {
                let mean = rows.iter().map(|&r| h.get(r, i)).sum::<f64>() / rows.len() as f64;
                hebb.set(i, c, (1.0 - eta) * hebb.get(i, c) + eta * mean);
            }
        }
    }

    #[test]
    fn hand_executed_batch_update() {
        let mut l = layer(2, 6, 0.5);
        let h = Matrix::from_vec(3, 2, vec![1.0, 0.0, 3.0, 2.0, 5.0, 5.0]);
        l.hebb_batch_update(&h, &[2, 2, 5]).unwrap();
        assert_eq!(l.hebb.get(0, 2), 1.0);
        assert_eq!(l.hebb.get(1, 2), 0.5);
        assert_eq!(l.hebb.get(0, 5), 2.5);
        assert_eq!(l.hebb.get(1, 5), 2.5);
        for c in [0, 1, 3, 4] {
            assert_eq!(l.hebb.get(0, c), 0.0);
            assert_eq!(l.hebb.get(1, c), 0.0);
        }
    }

    #[test]
    fn zero_rate_leaves_trace_unchanged() {
        let mut l = layer(3, 4, 0.0);
        l.hebb = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let before = l.hebb.clone();
        let h = Matrix::from_fn(5, 3, |i, j| (i + j) as f64 * 0.1);
        l.hebb_batch_update(&h, &[0, 1, 2, 3, 0]).unwrap();
        assert_eq!(l.hebb, before);
    }

    #[test]
    fn full_rate_replaces_column() {
        let mut l = layer(2, 3, 1.0);
        l.hebb = Matrix::filled(2, 3, 9.0);
        let h = Matrix::from_vec(1, 2, vec![0.25, -0.5]);
        l.hebb_batch_update(&h, &[1]).unwrap();
        assert_eq!(l.hebb.get(0, 1), 0.25);
        assert_eq!(l.hebb.get(1, 1), -0.5);
        assert_eq!(l.hebb.get(0, 0), 9.0);
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut l = layer(2, 3, 0.7);
        l.hebb = Matrix::filled(2, 3, 1.0);
        let before = l.hebb.clone();
        l.hebb_batch_update(&Matrix::zeros(1, 2), &[]).unwrap();
        assert_eq!(l.hebb, before);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let mut l = layer(2, 3, 0.5);
        let h = Matrix::zeros(1, 2);
        assert!(l.hebb_batch_update(&h, &[3]).is_err());
    }

    #[test]
    fn absent_columns_bit_identical() {
        let mut rng = derive_rng(11, "test", 0);
        let mut l = layer(4, 10, 0.3);
        l.hebb = Matrix::from_fn(4, 10, |_, _| rng.gen_range(-1.0..1.0));
        let before = l.hebb.clone();
        let h = Matrix::from_fn(6, 4, |_, _| rng.gen_range(-1.0..1.0));
        let labels = [3, 7, 3, 7, 3, 7];
        l.hebb_batch_update(&h, &labels).unwrap();
        for c in (0..10).filter(|c| *c != 3 && *c != 7) {
            for i in 0..4 {
                assert_eq!(l.hebb.get(i, c).to_bits(), before.get(i, c).to_bits());
            }
        }
    }

    #[test]
    fn matches_sample_loop_reference() {
        let mut rng = derive_rng(42, "oracle", 0);
        for _ in 0..200 {
            let m = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=10);
            let b = rng.gen_range(1..=16);
            let eta = rng.gen_range(0.0..1.0);
            let mut l = layer(m, d, eta);
            l.hebb = Matrix::from_fn(m, d, |_, _| rng.gen_range(-2.0..2.0));
            let mut reference = l.hebb.clone();
            let h = Matrix::from_fn(b, m, |_, _| rng.gen_range(-2.0..2.0));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..d)).collect();
            l.hebb_batch_update(&h, &labels).unwrap();
            reference_update(&mut reference, &h, &labels, eta);
            assert_eq!(l.hebb, reference);
        }
    }

    #[test]
    fn geometric_convergence_to_mean() {
        let mut l = layer(3, 2, 0.25);
        let h = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let target = h.clone();
        let mut prev_dist = f64::INFINITY;
        for step in 0..40 {
            l.hebb_batch_update(&h, &[0]).unwrap();
            let dist: f64 = (0..3)
                .map(|i| (l.hebb.get(i, 0) - target.get(0, i)).powi(2))
                .sum::<f64>()
                .sqrt();
            if step > 0 {
                assert!((dist - 0.75 * prev_dist).abs() < 1e-12);
            }
            prev_dist = dist;
        }
        assert!(prev_dist < 1e-2);
    }

    #[test]
    fn eval_forward_is_pure_and_reduces_to_slow_weights() {
        let mut l = layer(2, 2, 0.5);
        l.theta = Matrix::identity(2);
        let h = Matrix::from_vec(1, 2, vec![3.0, 4.0]);
        let z1 = l.forward_eval(&h);
        let z2 = l.forward_eval(&h);
        assert_eq!(z1, z2);
        assert_eq!(z1, Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        // Nonzero traces with alpha=0 still reduce to theta^T h.
        l.hebb = Matrix::filled(2, 2, 5.0);
        assert_eq!(l.forward_eval(&h), Matrix::from_vec(1, 2, vec![3.0, 4.0]));
    }

    #[test]
    fn plastic_only_forward() {
        let mut l = layer(2, 2, 0.5);
        l.alpha = Matrix::filled(2, 2, 1.0);
        l.hebb = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]);
        let h = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        assert_eq!(l.forward_eval(&h), Matrix::from_vec(1, 2, vec![1.0, 2.0]));
    }

    #[test]
    fn first_batch_perturbation_bound() {
        // Fresh traces + eta: |z - z_slow| <= eta * ||alpha||_max * ||h||^2.
        let mut rng = derive_rng(5, "bound", 0);
        let eta = 0.001;
        let mut l = layer(4, 3, eta);
        l.theta = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        l.alpha = Matrix::from_fn(4, 3, |_, _| rng.gen_range(-0.01..0.01));
        let h = Matrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
        let labels = [0, 1];
        let z_slow = h.matmul(&l.theta).unwrap();

        let mut tape = Tape::new();
        let h_var = tape.constant(h.clone());
        let th = tape.leaf(l.theta.clone());
        let al = tape.leaf(l.alpha.clone());
        let et = tape.leaf(Matrix::scalar(l.eta));
        let (z, _) = l.forward_train(&mut tape, h_var, th, al, et, &labels).unwrap();
        let z = tape.value(z);

        let h_norm_sq: f64 = h.data().iter().map(|v| v * v).sum();
        let bound = eta * l.alpha.max_abs() * h_norm_sq;
        for i in 0..2 {
            for j in 0..3 {
                assert!((z.get(i, j) - z_slow.get(i, j)).abs() <= bound + 1e-12);
            }
        }
    }

    #[test]
    fn tape_update_matches_plain_update() {
        let mut rng = derive_rng(9, "tapeeq", 0);
        for _ in 0..50 {
            let m = rng.gen_range(1..=6);
            let d = rng.gen_range(1..=5);
            let b = rng.gen_range(1..=8);
            let mut l = layer(m, d, rng.gen_range(0.0..1.0));
            l.hebb = Matrix::from_fn(m, d, |_, _| rng.gen_range(-1.0..1.0));
            let h = Matrix::from_fn(b, m, |_, _| rng.gen_range(-1.0..1.0));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..d)).collect();

            let mut tape = Tape::new();
            let h_var = tape.constant(h.clone());
            let th = tape.leaf(l.theta.clone());
            let al = tape.leaf(l.alpha.clone());
            let et = tape.leaf(Matrix::scalar(l.eta));
            let (_, hebb_new) = l.forward_train(&mut tape, h_var, th, al, et, &labels).unwrap();
            let tape_hebb = tape.value(hebb_new).clone();

            l.hebb_batch_update(&h, &labels).unwrap();
            assert_eq!(l.hebb, tape_hebb);
        }
    }

    #[test]
    fn stationary_trace_gives_zero_eta_gradient() {
        // hebb = 0 and all-zero activations: d loss / d eta must be 0.
        let l = layer(3, 2, 0.4);
        let h = Matrix::zeros(2, 3);
        let mut tape = Tape::new();
        let h_var = tape.constant(h);
        let th = tape.leaf(l.theta.clone());
        let al = tape.leaf(l.alpha.clone());
        let et = tape.leaf(Matrix::scalar(l.eta));
        let (z, _) = l.forward_train(&mut tape, h_var, th, al, et, &[0, 1]).unwrap();
        let loss = tape.softmax_cross_entropy(z, &[0, 1], None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(et).get(0, 0), 0.0);
    }

    #[test]
    fn init_defaults() {
        let mut rng = derive_rng(1, "init", 0);
        let l = DhpSoftmaxLayer::init(5, 7, 0.001, &mut rng);
        assert_eq!(l.eta, 0.001);
        assert_eq!(l.hebb, Matrix::zeros(5, 7));
        assert!(l.alpha.max_abs() <= 0.01);
        let bound = (6.0 / 12.0f64).sqrt();
        assert!(l.theta.max_abs() <= bound);

        let mut rng2 = derive_rng(1, "init", 0);
        let l2 = DhpSoftmaxLayer::init(5, 7, 0.001, &mut rng2);
        assert_eq!(l.theta, l2.theta);
        assert_eq!(l.alpha, l2.alpha);
    }
}
