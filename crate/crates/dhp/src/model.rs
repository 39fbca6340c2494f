//! MLP backbones with interchangeable softmax heads.
//!
//! Heads: the plastic DHP head, a plain linear softmax, and a
//! capacity-matched plain head carrying a second slow-weight matrix so the
//! baseline has the same parameter count as theta+alpha in the DHP head.
//!
//! Every trainable tensor is exposed through a flat registry with a role.
//! The optimizer steps everything except `State` (the Hebbian trace), and
//! consolidation looks only at `SlowWeight` entries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layer::{DhpSoftmaxLayer, HebbGradMode};
use crate::ndcore::{Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Dhp,
    Plain,
    PlainCapacityMatched,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub head: HeadKind,
    pub output_dim: usize,
    pub eta0: f64,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(crate::error::Error::Config(
                "all layer widths must be positive".into(),
            ));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(crate::error::Error::Config(format!(
                "leaky slope must be in (0,1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    SlowWeight,
    Plasticity,
    PlasticityRate,
    State,
}

#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub role: ParamRole,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub enum Head {
    Dhp(DhpSoftmaxLayer),
    Plain {
        theta: Matrix,
    },
    CapacityMatched {
        theta: Matrix,
        theta_extra: Matrix,
    },
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub config: MlpConfig,
    pub layers: Vec<DenseLayer>,
    pub head: Head,
    /// Output bias; a slow weight shared by every head kind.
    pub head_bias: Matrix,
}

/// Tape handles produced by a forward pass, aligned with the registry.
pub struct ForwardGraph {
    pub z: Var,
    /// One entry per registry slot; `None` for state (the trace is not a
    /// tape leaf).
    pub param_vars: Vec<Option<Var>>,
    /// Updated-trace node, present only for a training-mode DHP forward.
    pub hebb_new: Option<Var>,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

impl Mlp {
    pub fn new(config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut fan_in = config.input_dim;
        for &width in &config.hidden {
            layers.push(DenseLayer {
                weight: glorot(fan_in, width, rng),
                bias: Matrix::zeros(1, width),
            });
            fan_in = width;
        }
        let (m, d) = (fan_in, config.output_dim);
        let head = match config.head {
            HeadKind::Dhp => Head::Dhp(DhpSoftmaxLayer::init(m, d, config.eta0, rng)),
            HeadKind::Plain => Head::Plain {
                theta: glorot(m, d, rng),
            },
            HeadKind::PlainCapacityMatched => Head::CapacityMatched {
                theta: glorot(m, d, rng),
                theta_extra: glorot(m, d, rng),
            },
        };
        Ok(Mlp {
            config,
            layers,
            head,
            head_bias: Matrix::zeros(1, d),
        })
    }

    /// Convert a plain-head model into its capacity-matched variant by
    /// adding a second slow matrix of the same shape.
    pub fn make_capacity_matched(&mut self, rng: &mut impl Rng) -> Result<()> {
        match &self.head {
            Head::Plain { theta } => {
                let (m, d) = theta.shape();
                self.head = Head::CapacityMatched {
                    theta: theta.clone(),
                    theta_extra: glorot(m, d, rng),
                };
                self.config.head = HeadKind::PlainCapacityMatched;
                Ok(())
            }
            _ => Err(crate::error::Error::Config(
                "capacity matching applies to a plain head only".into(),
            )),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.config.hidden.last().copied().unwrap_or(self.config.input_dim)
    }

    pub fn registry(&self) -> Vec<ParamMeta> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            out.push(ParamMeta {
                name: format!("hidden{k}.weight"),
                role: ParamRole::SlowWeight,
                rows: layer.weight.rows(),
                cols: layer.weight.cols(),
            });
            out.push(ParamMeta {
                name: format!("hidden{k}.bias"),
                role: ParamRole::SlowWeight,
                rows: 1,
                cols: layer.bias.cols(),
            });
        }
        let (m, d) = (self.hidden_width(), self.config.output_dim);
        out.push(ParamMeta {
            name: "head.theta".into(),
            role: ParamRole::SlowWeight,
            rows: m,
            cols: d,
        });
        if matches!(self.head, Head::CapacityMatched { .. }) {
            out.push(ParamMeta {
                name: "head.theta_extra".into(),
                role: ParamRole::SlowWeight,
                rows: m,
                cols: d,
            });
        }
        out.push(ParamMeta {
            name: "head.bias".into(),
            role: ParamRole::SlowWeight,
            rows: 1,
            cols: d,
        });
        if let Head::Dhp(_) = self.head {
            out.push(ParamMeta {
                name: "head.alpha".into(),
                role: ParamRole::Plasticity,
                rows: m,
                cols: d,
            });
            out.push(ParamMeta {
                name: "head.eta".into(),
                role: ParamRole::PlasticityRate,
                rows: 1,
                cols: 1,
            });
            out.push(ParamMeta {
                name: "head.hebb".into(),
                role: ParamRole::State,
                rows: m,
                cols: d,
            });
        }
        out
    }

    /// Registry-aligned copies of all parameter values (eta as a 1x1).
    pub fn param_values(&self) -> Vec<Matrix> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weight.clone());
            out.push(layer.bias.clone());
        }
        match &self.head {
            Head::Dhp(l) => {
                out.push(l.theta.clone());
                out.push(self.head_bias.clone());
                out.push(l.alpha.clone());
                out.push(Matrix::scalar(l.eta));
                out.push(l.hebb.clone());
            }
            Head::Plain { theta } => {
                out.push(theta.clone());
                out.push(self.head_bias.clone());
            }
            Head::CapacityMatched { theta, theta_extra } => {
                out.push(theta.clone());
                out.push(theta_extra.clone());
                out.push(self.head_bias.clone());
            }
        }
        out
    }

    /// Overwrite all parameters from registry-aligned values.
    pub fn set_param_values(&mut self, values: &[Matrix]) {
        let registry = self.registry();
        assert_eq!(values.len(), registry.len(), "registry size mismatch");
        let mut it = values.iter();
        for layer in &mut self.layers {
            layer.weight = it.next().unwrap().clone();
            layer.bias = it.next().unwrap().clone();
        }
        match &mut self.head {
            Head::Dhp(l) => {
                l.theta = it.next().unwrap().clone();
                self.head_bias = it.next().unwrap().clone();
                l.alpha = it.next().unwrap().clone();
                l.eta = it.next().unwrap().get(0, 0);
                l.hebb = it.next().unwrap().clone();
            }
            Head::Plain { theta } => {
                *theta = it.next().unwrap().clone();
                self.head_bias = it.next().unwrap().clone();
            }
            Head::CapacityMatched { theta, theta_extra } => {
                *theta = it.next().unwrap().clone();
                *theta_extra = it.next().unwrap().clone();
                self.head_bias = it.next().unwrap().clone();
            }
        }
    }

    /// Trainable scalar count (excludes the trace state).
    pub fn trainable_param_count(&self) -> usize {
        self.registry()
            .iter()
            .filter(|p| p.role != ParamRole::State)
            .map(|p| p.rows * p.cols)
            .sum()
    }

    /// Build the forward graph on a tape. With `train_labels` present the
    /// DHP trace update runs first (and `hebb_new` is returned so the
    /// caller can commit it after the optimizer step); otherwise traces are
    /// baked in as constants.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        x: &Matrix,
        train_labels: Option<&[usize]>,
    ) -> Result<ForwardGraph> {
        let mut param_vars: Vec<Option<Var>> = Vec::new();
        let mut h = tape.constant(x.clone());
        for layer in &self.layers {
            let w = tape.leaf(layer.weight.clone());
            let b = tape.leaf(layer.bias.clone());
            param_vars.push(Some(w));
            param_vars.push(Some(b));
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = tape.leaky_relu(a, self.config.leaky_slope);
        }
        let bias = tape.leaf(self.head_bias.clone());
        let (z, hebb_new) = match &self.head {
            Head::Dhp(layer) => {
                let th = tape.leaf(layer.theta.clone());
                let al = tape.leaf(layer.alpha.clone());
                let et = tape.leaf(Matrix::scalar(layer.eta));
                let (z, hebb_new) = match train_labels {
                    Some(labels) => {
                        let (z, hebb_new) =
                            layer.forward_train(tape, h, th, al, et, labels)?;
                        (z, Some(hebb_new))
                    }
                    None => {
                        let hebb = tape.constant(layer.hebb.clone());
                        let fast = tape.mul(al, hebb)?;
                        let w = tape.add(th, fast)?;
                        (tape.matmul(h, w)?, None)
                    }
                };
                param_vars.push(Some(th));
                param_vars.push(Some(bias));
                param_vars.push(Some(al));
                param_vars.push(Some(et));
                param_vars.push(None); // hebb: state, not a leaf
                (z, hebb_new)
            }
            Head::Plain { theta } => {
                let th = tape.leaf(theta.clone());
                param_vars.push(Some(th));
                param_vars.push(Some(bias));
                (tape.matmul(h, th)?, None)
            }
            Head::CapacityMatched { theta, theta_extra } => {
                let th = tape.leaf(theta.clone());
                let tx = tape.leaf(theta_extra.clone());
                param_vars.push(Some(th));
                param_vars.push(Some(tx));
                param_vars.push(Some(bias));
                let w = tape.add(th, tx)?;
                (tape.matmul(h, w)?, None)
            }
        };
        let z = tape.add_row(z, bias)?;
        Ok(ForwardGraph {
            z,
            param_vars,
            hebb_new,
        })
    }

    /// Plain-math evaluation forward; never mutates anything.
    pub fn forward_eval(&self, x: &Matrix) -> Matrix {
        let mut h = x.clone();
        for layer in &self.layers {
            let a = h.matmul(&layer.weight).unwrap();
            let a = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + layer.bias.get(0, j));
            h = crate::ndcore::leaky_relu(&a, self.config.leaky_slope);
        }
        let z = match &self.head {
            Head::Dhp(l) => l.forward_eval(&h),
            Head::Plain { theta } => h.matmul(theta).unwrap(),
            Head::CapacityMatched { theta, theta_extra } => {
                h.matmul(&theta.add(theta_extra).unwrap()).unwrap()
            }
        };
        Matrix::from_fn(z.rows(), z.cols(), |i, j| z.get(i, j) + self.head_bias.get(0, j))
    }

    /// One SGD step from registry-aligned gradients. State entries are
    /// skipped; eta is clamped to [0,1] after the step unless disabled.
    pub fn sgd_step(&mut self, grads: &[Matrix], lr: f64, clamp_eta: bool) {
        let registry = self.registry();
        assert_eq!(grads.len(), registry.len());
        let mut values = self.param_values();
        for (k, meta) in registry.iter().enumerate() {
            match meta.role {
                ParamRole::State => continue,
                ParamRole::PlasticityRate => {
                    let mut eta = values[k].get(0, 0) - lr * grads[k].get(0, 0);
                    if clamp_eta {
                        eta = eta.clamp(0.0, 1.0);
                    }
                    values[k] = Matrix::scalar(eta);
                }
                _ => {
                    let g = &grads[k];
                    let v = &mut values[k];
                    for (pv, gv) in v.data_mut().iter_mut().zip(g.data().iter()) {
                        *pv -= lr * gv;
                    }
                }
            }
        }
        self.set_param_values(&values);
    }

    /// Commit the post-batch trace produced by a training forward.
    pub fn commit_hebb(&mut self, hebb: Matrix) {
        if let Head::Dhp(l) = &mut self.head {
            l.hebb = hebb;
        }
    }

    pub fn dhp_layer(&self) -> Option<&DhpSoftmaxLayer> {
        match &self.head {
            Head::Dhp(l) => Some(l),
            _ => None,
        }
    }

    pub fn set_hebb_grad_mode(&mut self, mode: HebbGradMode) {
        if let Head::Dhp(l) = &mut self.head {
            l.grad_mode = mode;
        }
    }

    /// Deep value copy; mutating the original never affects the snapshot.
    pub fn snapshot(&self) -> Mlp {
        self.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::derive_rng;

    fn cfg(head: HeadKind) -> MlpConfig {
        MlpConfig {
            input_dim: 6,
            hidden: vec![5, 4],
            leaky_slope: 0.3,
            head,
            output_dim: 3,
            eta0: 0.001,
        }
    }

    #[test]
    fn zero_everything_gives_zero_logits() {
        let mut rng = derive_rng(0, "m", 0);
        let mut m = Mlp::new(cfg(HeadKind::Plain), &mut rng).unwrap();
        let zeroed: Vec<Matrix> = m
            .param_values()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        m.set_param_values(&zeroed);
        let z = m.forward_eval(&Matrix::zeros(2, 6));
        assert_eq!(z, Matrix::zeros(2, 3));
    }

    #[test]
    fn dhp_with_zero_alpha_matches_plain() {
        let mut rng = derive_rng(3, "m", 0);
        let dhp = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        let mut dhp = dhp;
        // Zero alpha, put junk in hebb: output must still equal the plain model.
        if let Head::Dhp(l) = &mut dhp.head {
            l.alpha = Matrix::zeros(4, 3);
            l.hebb = Matrix::filled(4, 3, 7.5);
        }
        let mut plain = Mlp::new(cfg(HeadKind::Plain), &mut rng).unwrap();
        plain.layers = dhp.layers.clone();
        plain.head_bias = dhp.head_bias.clone();
        if let (Head::Plain { theta }, Head::Dhp(l)) = (&mut plain.head, &dhp.head) {
            *theta = l.theta.clone();
        }
        let x = Matrix::from_fn(3, 6, |i, j| (i as f64 - j as f64) * 0.17);
        let za = dhp.forward_eval(&x);
        let zb = plain.forward_eval(&x);
        assert_eq!(za, zb);
    }

    #[test]
    fn capacity_matched_parameter_count() {
        let mut rng = derive_rng(4, "m", 0);
        let dhp = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        let matched = Mlp::new(cfg(HeadKind::PlainCapacityMatched), &mut rng).unwrap();
        assert_eq!(
            matched.trainable_param_count(),
            dhp.trainable_param_count() - 1
        );
    }

    #[test]
    fn capacity_matched_zero_extra_equals_plain() {
        let mut rng = derive_rng(5, "m", 0);
        let plain = Mlp::new(cfg(HeadKind::Plain), &mut rng).unwrap();
        let mut matched = plain.clone();
        matched.make_capacity_matched(&mut rng).unwrap();
        if let Head::CapacityMatched { theta_extra, .. } = &mut matched.head {
            *theta_extra = Matrix::zeros(4, 3);
        }
        let x = Matrix::from_fn(2, 6, |i, j| (i + j) as f64 * 0.05);
        assert_eq!(plain.forward_eval(&x), matched.forward_eval(&x));
    }

    #[test]
    fn make_capacity_matched_requires_plain() {
        let mut rng = derive_rng(6, "m", 0);
        let mut dhp = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        assert!(dhp.make_capacity_matched(&mut rng).is_err());
    }

    #[test]
    fn snapshot_is_independent() {
        let mut rng = derive_rng(7, "m", 0);
        let mut m = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        let snap = m.snapshot();
        let x = Matrix::from_fn(2, 6, |i, j| (i * 6 + j) as f64 * 0.01);
        let before = m.forward_eval(&x);
        // Mutate the original.
        let grads: Vec<Matrix> = m
            .param_values()
            .iter()
            .map(|p| Matrix::filled(p.rows(), p.cols(), 0.5))
            .collect();
        m.sgd_step(&grads, 0.1, true);
        assert_ne!(m.forward_eval(&x), before);
        assert_eq!(snap.forward_eval(&x), before);
    }

    #[test]
    fn optimizer_never_touches_hebb() {
        let mut rng = derive_rng(8, "m", 0);
        let mut m = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        if let Head::Dhp(l) = &mut m.head {
            l.hebb = Matrix::filled(4, 3, 2.5);
        }
        let grads: Vec<Matrix> = m
            .registry()
            .iter()
            .map(|p| Matrix::filled(p.rows, p.cols, 1.0))
            .collect();
        m.sgd_step(&grads, 0.1, true);
        assert_eq!(m.dhp_layer().unwrap().hebb, Matrix::filled(4, 3, 2.5));
    }

    #[test]
    fn eta_clamped_to_unit_interval() {
        let mut rng = derive_rng(9, "m", 0);
        let mut m = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        let registry = m.registry();
        let grads: Vec<Matrix> = registry
            .iter()
            .map(|p| {
                if p.role == ParamRole::PlasticityRate {
                    Matrix::scalar(100.0)
                } else {
                    Matrix::zeros(p.rows, p.cols)
                }
            })
            .collect();
        m.sgd_step(&grads, 1.0, true);
        assert_eq!(m.dhp_layer().unwrap().eta, 0.0);
    }

    #[test]
    fn registry_roles_cover_expected_params() {
        let mut rng = derive_rng(10, "m", 0);
        let m = Mlp::new(cfg(HeadKind::Dhp), &mut rng).unwrap();
        let reg = m.registry();
        let slow: Vec<&str> = reg
            .iter()
            .filter(|p| p.role == ParamRole::SlowWeight)
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(
            slow,
            vec![
                "hidden0.weight",
                "hidden0.bias",
                "hidden1.weight",
                "hidden1.bias",
                "head.theta",
                "head.bias"
            ]
        );
        assert!(reg.iter().any(|p| p.name == "head.hebb" && p.role == ParamRole::State));
    }
}
