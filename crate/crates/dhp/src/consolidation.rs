//! Synaptic consolidation: a quadratic penalty anchoring important slow
//! weights to their post-task values.
//!
//! penalty = lambda * sum_k Omega_k (theta_k - theta*_k)^2
//!
//! Importance `Omega` is estimated three ways: Online EWC (diagonal
//! empirical Fisher, decayed accumulation), SI (path integral of loss
//! decrease per parameter, normalized by total displacement), and MAS
//! (mean absolute sensitivity of the squared output norm). Only parameters
//! with role `SlowWeight` ever carry importance; the plastic component
//! (alpha, eta) and the trace state are never regularized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mlp, ParamRole};
use crate::ndcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidationMethod {
    None,
    OnlineEwc,
    Si,
    Mas,
}

#[derive(Clone, Debug)]
pub struct ImportanceState {
    pub method: ConsolidationMethod,
    pub lambda: f64,
    /// SI damping in the displacement denominator.
    pub xi: f64,
    /// Online-EWC decay on the accumulated Fisher.
    pub gamma: f64,
    /// Omega: per-slow-parameter importance.
    pub omega: Vec<Matrix>,
    /// theta*: anchor values from the end of the previous task.
    pub anchors: Vec<Matrix>,
    /// SI per-parameter path accumulator (omega-lowercase in SI).
    pub path_acc: Vec<Matrix>,
    /// Slow-parameter values at the start of the current task (SI).
    pub task_start: Vec<Matrix>,
    pub tasks_seen: usize,
}

/// Registry-order values of the slow-weight parameters only.
pub fn slow_param_values(model: &Mlp) -> Vec<Matrix> {
    model
        .registry()
        .iter()
        .zip(model.param_values())
        .filter(|(meta, _)| meta.role == ParamRole::SlowWeight)
        .map(|(_, v)| v)
        .collect()
}

impl ImportanceState {
    pub fn new(
        method: ConsolidationMethod,
        lambda: f64,
        xi: f64,
        gamma: f64,
        model: &Mlp,
    ) -> Result<Self> {
        if method == ConsolidationMethod::Si && xi <= 0.0 {
            return Err(Error::Config(format!("SI damping xi must be > 0, got {xi}")));
        }
        let slow = slow_param_values(model);
        let zeros: Vec<Matrix> = slow
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Ok(ImportanceState {
            method,
            lambda,
            xi,
            gamma,
            omega: zeros.clone(),
            anchors: slow.clone(),
            path_acc: zeros,
            task_start: slow,
            tasks_seen: 0,
        })
    }

    /// Penalty value for explicit slow-parameter values.
    pub fn penalty_from(&self, slow: &[Matrix]) -> f64 {
        assert_eq!(slow.len(), self.omega.len(), "slow parameter count mismatch");
        if self.method == ConsolidationMethod::None {
            return 0.0;
        }
        let mut total = 0.0;
        for ((theta, omega), anchor) in slow.iter().zip(&self.omega).zip(&self.anchors) {
            for ((&t, &o), &a) in theta
                .data()
                .iter()
                .zip(omega.data())
                .zip(anchor.data())
            {
                total += o * (t - a) * (t - a);
            }
        }
        self.lambda * total
    }

    pub fn penalty(&self, model: &Mlp) -> f64 {
        self.penalty_from(&slow_param_values(model))
    }

    /// Analytic penalty gradient, 2*lambda*Omega*(theta - theta*), aligned
    /// with the full registry (zeros for non-slow slots).
    pub fn penalty_grads(&self, model: &Mlp) -> Vec<Matrix> {
        let registry = model.registry();
        let values = model.param_values();
        let mut out: Vec<Matrix> = registry
            .iter()
            .map(|p| Matrix::zeros(p.rows, p.cols))
            .collect();
        if self.method == ConsolidationMethod::None {
            return out;
        }
        let mut slow_idx = 0;
        for (k, meta) in registry.iter().enumerate() {
            if meta.role != ParamRole::SlowWeight {
                continue;
            }
            let omega = &self.omega[slow_idx];
            let anchor = &self.anchors[slow_idx];
            let theta = &values[k];
            out[k] = Matrix::from_fn(meta.rows, meta.cols, |i, j| {
                2.0 * self.lambda * omega.get(i, j) * (theta.get(i, j) - anchor.get(i, j))
            });
            slow_idx += 1;
        }
        out
    }

    /// SI per-step accumulation: path_acc += -g * dtheta, using the total
    /// gradient that produced the step and the realized parameter change.
    /// No-op for other methods.
    pub fn si_accumulate_step(&mut self, slow_grads: &[Matrix], slow_deltas: &[Matrix]) {
        if self.method != ConsolidationMethod::Si {
            return;
        }
        assert_eq!(slow_grads.len(), self.path_acc.len());
        for ((acc, g), d) in self.path_acc.iter_mut().zip(slow_grads).zip(slow_deltas) {
            for ((a, &gv), &dv) in acc.data_mut().iter_mut().zip(g.data()).zip(d.data()) {
                *a += -gv * dv;
            }
        }
    }

    /// SI end-of-task consolidation:
    /// Omega += max(path_acc, 0) / ((theta_end - theta_start)^2 + xi),
    /// then the path accumulator resets and anchors move to theta_end.
    pub fn si_consolidate(&mut self, model: &Mlp) -> Result<()> {
        if self.xi <= 0.0 {
            return Err(Error::Config(format!("SI damping xi must be > 0, got {}", self.xi)));
        }
        let theta_end = slow_param_values(model);
        for k in 0..self.omega.len() {
            let acc = &self.path_acc[k];
            let start = &self.task_start[k];
            let end = &theta_end[k];
            let omega = &mut self.omega[k];
            for i in 0..omega.len() {
                let w = acc.data()[i].max(0.0);
                let disp = end.data()[i] - start.data()[i];
                omega.data_mut()[i] += w / (disp * disp + self.xi);
            }
        }
        for acc in &mut self.path_acc {
            *acc = Matrix::zeros(acc.rows(), acc.cols());
        }
        self.task_start = theta_end.clone();
        self.anchors = theta_end;
        self.tasks_seen += 1;
        Ok(())
    }

    /// Online-EWC end-of-task consolidation from the task's training data:
    /// F = mean over samples of squared per-sample log-likelihood gradient
    /// (empirical Fisher, true labels); Omega <- gamma*Omega + F.
    pub fn ewc_consolidate<I>(
        &mut self,
        model: &Mlp,
        batches: I,
        mask: Option<&[bool]>,
    ) -> Result<()>
    where
        I: IntoIterator<Item = (Matrix, Vec<usize>)>,
    {
        let fisher = per_sample_grad_moment(model, batches, mask, GradMoment::MeanSquare)?;
        for (omega, f) in self.omega.iter_mut().zip(&fisher) {
            for (o, &fv) in omega.data_mut().iter_mut().zip(f.data()) {
                *o = self.gamma * *o + fv;
            }
        }
        self.anchors = slow_param_values(model);
        self.task_start = self.anchors.clone();
        self.tasks_seen += 1;
        Ok(())
    }

    /// MAS end-of-task consolidation: Omega accumulates the mean absolute
    /// gradient of the squared L2 norm of the pre-activations.
    pub fn mas_consolidate<I>(
        &mut self,
        model: &Mlp,
        batches: I,
        mask: Option<&[bool]>,
    ) -> Result<()>
    where
        I: IntoIterator<Item = (Matrix, Vec<usize>)>,
    {
        let sens = per_sample_grad_moment(model, batches, mask, GradMoment::MeanAbsOutputNorm)?;
        for (omega, s) in self.omega.iter_mut().zip(&sens) {
            omega.add_assign(s);
        }
        self.anchors = slow_param_values(model);
        self.task_start = self.anchors.clone();
        self.tasks_seen += 1;
        Ok(())
    }
}

enum GradMoment {
    /// Mean of squared per-sample gradients of -log p(y|x) (sign-free).
    MeanSquare,
    /// Mean of |d ||z||^2 / d theta| per sample.
    MeanAbsOutputNorm,
}

/// Shared per-sample gradient sweep for the Fisher and MAS estimators.
///
/// Runs the model in evaluation mode (traces constant) one sample at a
/// time, in dataset order, accumulating per-slow-parameter statistics with
/// a fixed reduction order.
fn per_sample_grad_moment<I>(
    model: &Mlp,
    batches: I,
    mask: Option<&[bool]>,
    moment: GradMoment,
) -> Result<Vec<Matrix>>
where
    I: IntoIterator<Item = (Matrix, Vec<usize>)>,
{
    let registry = model.registry();
    let slow_slots: Vec<usize> = registry
        .iter()
        .enumerate()
        .filter(|(_, m)| m.role == ParamRole::SlowWeight)
        .map(|(k, _)| k)
        .collect();
    let mut acc: Vec<Matrix> = slow_slots
        .iter()
        .map(|&k| Matrix::zeros(registry[k].rows, registry[k].cols))
        .collect();
    let mut count = 0usize;
    for (x, labels) in batches {
        assert_eq!(x.rows(), labels.len(), "batch size mismatch");
        for r in 0..x.rows() {
            let row = Matrix::from_vec(1, x.cols(), x.row_slice(r).to_vec());
            let mut tape = crate::ndcore::Tape::new();
            let graph = model.forward_on_tape(&mut tape, &row, None)?;
            let loss = match moment {
                GradMoment::MeanSquare => {
                    tape.softmax_cross_entropy(graph.z, &[labels[r]], mask)?
                }
                GradMoment::MeanAbsOutputNorm => {
                    let z = match mask {
                        // Zero out inactive columns so they contribute
                        // nothing to the norm.
                        Some(m) => {
                            let keep = Matrix::from_fn(1, m.len(), |_, j| {
                                if m[j] {
                                    1.0
                                } else {
                                    0.0
                                }
                            });
                            let keep = tape.constant(keep);
                            tape.mul(graph.z, keep)?
                        }
                        None => graph.z,
                    };
                    let sq = tape.mul(z, z)?;
                    tape.sum(sq)
                }
            };
            tape.backward(loss)?;
            for (a, &slot) in acc.iter_mut().zip(&slow_slots) {
                let g = tape.grad(graph.param_vars[slot].expect("slow param is a leaf"));
                match moment {
                    GradMoment::MeanSquare => {
                        for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += gv * gv;
                        }
                    }
                    GradMoment::MeanAbsOutputNorm => {
                        for (av, &gv) in a.data_mut().iter_mut().zip(g.data()) {
                            *av += gv.abs();
                        }
                    }
                }
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyDataset("importance estimation"));
    }
    for a in &mut acc {
        *a = a.scale(1.0 / count as f64);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, MlpConfig};
    use crate::seeding::derive_rng;

    fn toy_model(input: usize, output: usize) -> Mlp {
        let mut rng = derive_rng(0, "consol", 0);
        Mlp::new(
            MlpConfig {
                input_dim: input,
                hidden: vec![],
                leaky_slope: 0.3,
                head: HeadKind::Plain,
                output_dim: output,
                eta0: 0.001,
            },
            &mut rng,
        )
        .unwrap()
    }

    fn two_param_state(omega: [f64; 2], anchors: [f64; 2], lambda: f64) -> ImportanceState {
        let model = toy_model(2, 1);
        let mut st =
            ImportanceState::new(ConsolidationMethod::Si, lambda, 0.1, 1.0, &model).unwrap();
        st.omega[0] = Matrix::from_vec(2, 1, omega.to_vec());
        st.anchors[0] = Matrix::from_vec(2, 1, anchors.to_vec());
        st
    }

    #[test]
    fn penalty_hand_arithmetic() {
        // Omega=[1,2], dtheta=[0.5,-1], lambda=2 -> 2*(0.25+2)=4.5.
        let st = two_param_state([1.0, 2.0], [0.0, 0.0], 2.0);
        let theta = vec![
            Matrix::from_vec(2, 1, vec![0.5, -1.0]),
            st.anchors[1].clone(),
        ];
        assert!((st.penalty_from(&theta) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn penalty_zero_at_anchor_and_with_zero_omega() {
        let st = two_param_state([1.0, 2.0], [0.3, -0.7], 5.0);
        let at_anchor = st.anchors.clone();
        assert_eq!(st.penalty_from(&at_anchor), 0.0);

        let st0 = two_param_state([0.0, 0.0], [0.0, 0.0], 5.0);
        let theta = vec![
            Matrix::from_vec(2, 1, vec![100.0, -100.0]),
            st0.anchors[1].clone(),
        ];
        assert_eq!(st0.penalty_from(&theta), 0.0);
    }

    #[test]
    fn fresh_state_has_zero_penalty() {
        let model = toy_model(3, 2);
        for method in [ConsolidationMethod::OnlineEwc, ConsolidationMethod::Mas] {
            let st = ImportanceState::new(method, 100.0, 0.1, 1.0, &model).unwrap();
            assert_eq!(st.tasks_seen, 0);
            assert_eq!(st.penalty(&model), 0.0);
        }
    }

    #[test]
    fn si_step_accumulation() {
        let model = toy_model(1, 1);
        let mut st = ImportanceState::new(ConsolidationMethod::Si, 1.0, 0.1, 1.0, &model).unwrap();
        let n = st.path_acc.len();
        let ones: Vec<Matrix> = st.path_acc.iter().map(|p| Matrix::filled(p.rows(), p.cols(), 1.0)).collect();
        let deltas: Vec<Matrix> = st.path_acc.iter().map(|p| Matrix::filled(p.rows(), p.cols(), -0.1)).collect();
        st.si_accumulate_step(&ones, &deltas);
        for k in 0..n {
            for &v in st.path_acc[k].data() {
                assert!((v - 0.1).abs() < 1e-15);
            }
        }
        // Two steps sum additively; zero delta changes nothing.
        st.si_accumulate_step(&ones, &deltas);
        let zeros: Vec<Matrix> = deltas.iter().map(|d| Matrix::zeros(d.rows(), d.cols())).collect();
        st.si_accumulate_step(&ones, &zeros);
        for k in 0..n {
            for &v in st.path_acc[k].data() {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn si_consolidate_hand_value() {
        // omega=0.1, total displacement -0.1, xi=0.1 -> 0.1/(0.01+0.1).
        let mut model = toy_model(1, 1);
        let mut st = ImportanceState::new(ConsolidationMethod::Si, 1.0, 0.1, 1.0, &model).unwrap();
        // Move head.theta (slow index of the 1x1 theta) by -0.1.
        let mut vals = model.param_values();
        vals[0] = Matrix::scalar(vals[0].get(0, 0) - 0.1);
        model.set_param_values(&vals);
        st.path_acc[0] = Matrix::scalar(0.1);
        st.si_consolidate(&model).unwrap();
        assert!((st.omega[0].get(0, 0) - 0.1 / 0.11).abs() < 1e-12);
        // Accumulator reset, anchors moved, bias row untouched (omega 0).
        assert_eq!(st.path_acc[0], Matrix::scalar(0.0));
        assert_eq!(st.anchors[0].get(0, 0), vals[0].get(0, 0));
        assert_eq!(st.omega[1].get(0, 0), 0.0);
        assert_eq!(st.tasks_seen, 1);
    }

    #[test]
    fn si_negative_path_clipped() {
        let model = toy_model(1, 1);
        let mut st = ImportanceState::new(ConsolidationMethod::Si, 1.0, 0.1, 1.0, &model).unwrap();
        st.path_acc[0] = Matrix::scalar(-5.0);
        let mut m2 = model.clone();
        let vals = m2.param_values();
        m2.set_param_values(&vals);
        st.si_consolidate(&m2).unwrap();
        assert_eq!(st.omega[0].get(0, 0), 0.0);
    }

    #[test]
    fn si_rejects_nonpositive_xi() {
        let model = toy_model(1, 1);
        assert!(ImportanceState::new(ConsolidationMethod::Si, 1.0, 0.0, 1.0, &model).is_err());
    }

    #[test]
    fn ewc_logistic_fisher() {
        // 2-class softmax with theta=0, bias=0, x=1: per-sample gradient of
        // -log p w.r.t. each theta entry is +/-0.5, so Fisher = 0.25.
        let mut model = toy_model(1, 2);
        let zeroed: Vec<Matrix> = model
            .param_values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        model.set_param_values(&zeroed);
        let mut st =
            ImportanceState::new(ConsolidationMethod::OnlineEwc, 1.0, 0.1, 1.0, &model).unwrap();
        let data = vec![(Matrix::from_vec(1, 1, vec![1.0]), vec![0usize])];
        st.ewc_consolidate(&model, data, None).unwrap();
        // slow order: head.theta (1x2), head.bias (1x2)
        for j in 0..2 {
            assert!((st.omega[0].get(0, j) - 0.25).abs() < 1e-12);
            assert!((st.omega[1].get(0, j) - 0.25).abs() < 1e-12);
        }
        assert_eq!(st.tasks_seen, 1);
    }

    #[test]
    fn ewc_accumulates_with_unit_gamma() {
        let mut model = toy_model(1, 2);
        let zeroed: Vec<Matrix> = model
            .param_values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        model.set_param_values(&zeroed);
        let mut st =
            ImportanceState::new(ConsolidationMethod::OnlineEwc, 1.0, 0.1, 1.0, &model).unwrap();
        let batch = || vec![(Matrix::from_vec(1, 1, vec![1.0]), vec![0usize])];
        st.ewc_consolidate(&model, batch(), None).unwrap();
        let first = st.omega[0].get(0, 0);
        st.ewc_consolidate(&model, batch(), None).unwrap();
        assert!((st.omega[0].get(0, 0) - 2.0 * first).abs() < 1e-12);
    }

    #[test]
    fn ewc_confident_model_has_tiny_fisher() {
        let mut model = toy_model(1, 2);
        let mut vals = model.param_values();
        vals[0] = Matrix::from_vec(1, 2, vec![50.0, -50.0]);
        vals[1] = Matrix::zeros(1, 2);
        model.set_param_values(&vals);
        let mut st =
            ImportanceState::new(ConsolidationMethod::OnlineEwc, 1.0, 0.1, 1.0, &model).unwrap();
        let data = vec![(Matrix::from_vec(1, 1, vec![1.0]), vec![0usize])];
        st.ewc_consolidate(&model, data, None).unwrap();
        assert!(st.omega[0].get(0, 0) < 1e-10);
    }

    #[test]
    fn ewc_empty_data_rejected() {
        let model = toy_model(1, 2);
        let mut st =
            ImportanceState::new(ConsolidationMethod::OnlineEwc, 1.0, 0.1, 1.0, &model).unwrap();
        let empty: Vec<(Matrix, Vec<usize>)> = vec![];
        assert!(st.ewc_consolidate(&model, empty, None).is_err());
    }

    #[test]
    fn mas_single_linear_unit() {
        // z = theta*x with theta=0.5, x=2: |d z^2/d theta| = |2 z x| = 4.
        let mut model = toy_model(1, 1);
        let mut vals = model.param_values();
        vals[0] = Matrix::scalar(0.5);
        vals[1] = Matrix::scalar(0.0);
        model.set_param_values(&vals);
        let mut st = ImportanceState::new(ConsolidationMethod::Mas, 1.0, 0.1, 1.0, &model).unwrap();
        let data = vec![(Matrix::from_vec(1, 1, vec![2.0]), vec![0usize])];
        st.mas_consolidate(&model, data, None).unwrap();
        assert!((st.omega[0].get(0, 0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mas_zero_weights_zero_importance() {
        let mut model = toy_model(1, 1);
        let zeroed: Vec<Matrix> = model
            .param_values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        model.set_param_values(&zeroed);
        let mut st = ImportanceState::new(ConsolidationMethod::Mas, 1.0, 0.1, 1.0, &model).unwrap();
        let data = vec![(Matrix::from_vec(1, 1, vec![2.0]), vec![0usize])];
        st.mas_consolidate(&model, data, None).unwrap();
        assert_eq!(st.omega[0].get(0, 0), 0.0);
    }

    #[test]
    fn omega_covers_exactly_slow_weights() {
        let mut rng = derive_rng(1, "consol", 0);
        let model = Mlp::new(
            MlpConfig {
                input_dim: 4,
                hidden: vec![3],
                leaky_slope: 0.3,
                head: HeadKind::Dhp,
                output_dim: 2,
                eta0: 0.001,
            },
            &mut rng,
        )
        .unwrap();
        let st = ImportanceState::new(ConsolidationMethod::Mas, 1.0, 0.1, 1.0, &model).unwrap();
        let slow: Vec<_> = model
            .registry()
            .into_iter()
            .filter(|p| p.role == ParamRole::SlowWeight)
            .collect();
        assert_eq!(st.omega.len(), slow.len());
        for (omega, meta) in st.omega.iter().zip(&slow) {
            assert_eq!(omega.shape(), (meta.rows, meta.cols));
        }
    }
}
