//! Reverse-mode autodiff over `Matrix` values.
//!
//! A `Tape` is an append-only arena of nodes; `Var` handles index into it.
//! Construction order is a topological order, so the backward pass is a
//! single reverse sweep that visits each node exactly once. Detached nodes
//! are leaves: they carry a value but propagate nothing upstream.
//!
//! The op set is exactly what the MLP + plastic softmax head needs. The one
//! bespoke node is `hebb_update`, which folds the per-class trace decay into
//! the graph so the plasticity rate receives a gradient through the current
//! batch while the pre-update trace stays constant.

use crate::error::{Error, Result};
use crate::ndcore::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (B x n) plus a broadcast (1 x n) row vector.
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sum(Var),
    SoftmaxXent {
        z: Var,
        labels: Vec<usize>,
        mask: Vec<bool>,
        /// Masked softmax probabilities, saved on forward for the backward pass.
        probs: Matrix,
    },
    /// Per-class means of rows of `h`; output row k is the mean of
    /// `h[rows_k]` for `groups[k] = (class, rows_k)`.
    ClassMean {
        h: Var,
        groups: Vec<(usize, Vec<usize>)>,
    },
    /// `out[:,c] = (1-eta) * prev[:,c] + eta * h_tilde[k,:]` for each updated
    /// class c; other columns copy `prev`. `prev` is a constant.
    HebbUpdate {
        prev: Matrix,
        h_tilde: Var,
        eta: Var,
        classes: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable/leaf input. Gradients accumulate here.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A constant input; same as a leaf whose gradient is simply ignored.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same value, no upstream gradient. Idempotent.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Matrix {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[v.0].value.shape();
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Broadcast-add a (1 x n) bias row to every row of a (B x n) matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let m = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: format!("{}x{}", m.rows(), m.cols()),
                rhs: format!("{}x{}", b.rows(), b.cols()),
            });
        }
        let value = Matrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j) + b.get(0, j));
        Ok(self.push(value, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.nodes[a.0].value.scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = crate::ndcore::matrix::leaky_relu(&self.nodes[a.0].value, slope);
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean cross-entropy of masked-softmax logits against integer labels.
    ///
    /// Columns outside `mask` are excluded from the normalization and get a
    /// zero gradient. Stable via max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(
        &mut self,
        z: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let zm = &self.nodes[z.0].value;
        let (batch, dim) = zm.shape();
        if labels.len() != batch {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: format!("{batch} rows"),
                rhs: format!("{} labels", labels.len()),
            });
        }
        let mask: Vec<bool> = match mask {
            Some(m) => {
                assert_eq!(m.len(), dim, "mask length must equal output dim");
                m.to_vec()
            }
            None => vec![true; dim],
        };
        for &y in labels {
            if y >= dim {
                return Err(Error::LabelOutOfRange { label: y, dim });
            }
            if !mask[y] {
                return Err(Error::MaskedLabel { label: y });
            }
        }
        let mut probs = Matrix::zeros(batch, dim);
        let mut total = 0.0;
        for b in 0..batch {
            let row = zm.row_slice(b);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..dim {
                if mask[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut lse = 0.0;
            for j in 0..dim {
                if mask[j] {
                    lse += (row[j] - mx).exp();
                }
            }
            let log_z = mx + lse.ln();
            total += log_z - row[labels[b]];
            for j in 0..dim {
                if mask[j] {
                    probs.set(b, j, (row[j] - log_z).exp());
                }
            }
        }
        let value = Matrix::scalar(total / batch as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                z,
                labels: labels.to_vec(),
                mask,
                probs,
            },
        ))
    }

    /// Row k of the output is the mean of `h`'s rows for class `groups[k].0`.
    pub fn class_mean(&mut self, h: Var, groups: Vec<(usize, Vec<usize>)>) -> Var {
        let hm = &self.nodes[h.0].value;
        let m = hm.cols();
        let mut value = Matrix::zeros(groups.len().max(1), m);
        for (k, (_, rows)) in groups.iter().enumerate() {
            let s = rows.len() as f64;
            // Sum then divide, matching the in-place trace update bit for bit.
            for j in 0..m {
                let sum: f64 = rows.iter().map(|&r| hm.get(r, j)).sum();
                value.set(k, j, sum / s);
            }
        }
        self.push(value, Op::ClassMean { h, groups })
    }

    /// Decayed trace update over the listed classes; see Algorithm node doc.
    /// `h_tilde` is (K x m) with row k for `classes[k]`; `eta` is 1x1.
    pub fn hebb_update(
        &mut self,
        prev: Matrix,
        h_tilde: Var,
        eta: Var,
        classes: Vec<usize>,
    ) -> Var {
        let eta_v = self.nodes[eta.0].value.get(0, 0);
        let ht = &self.nodes[h_tilde.0].value;
        let mut value = prev.clone();
        for (k, &c) in classes.iter().enumerate() {
            for i in 0..prev.rows() {
                let v = (1.0 - eta_v) * prev.get(i, c) + eta_v * ht.get(k, i);
                value.set(i, c, v);
            }
        }
        self.push(
            value,
            Op::HebbUpdate {
                prev,
                h_tilde,
                eta,
                classes,
            },
        )
    }

    fn accumulate(&mut self, v: Var, delta: &Matrix) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => g.add_assign(delta),
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar root. Gradients land on every reachable
    /// node; leaves keep theirs until the tape is dropped.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let (r, c) = self.nodes[root.0].value.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let g = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) {
        // Ops only reference earlier nodes, so moves out of self.nodes[idx].op
        // are avoided by matching on cheap copies / computing first.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.matmul(&self.nodes[b.0].value.transpose()).unwrap();
                let db = self.nodes[a.0].value.transpose().matmul(g).unwrap();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let neg = g.scale(-1.0);
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g.hadamard(&self.nodes[b.0].value).unwrap();
                let db = g.hadamard(&self.nodes[a.0].value).unwrap();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::AddRow(a, bias) => {
                let (a, bias) = (*a, *bias);
                let mut db = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        db.set(0, j, db.get(0, j) + g.get(i, j));
                    }
                }
                self.accumulate(a, g);
                self.accumulate(bias, &db);
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                let da = g.scale(s);
                self.accumulate(a, &da);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let x = &self.nodes[a.0].value;
                let da = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    let d = if x.get(i, j) > 0.0 { 1.0 } else { slope };
                    g.get(i, j) * d
                });
                self.accumulate(a, &da);
            }
            Op::Sum(a) => {
                let a = *a;
                let (r, c) = self.nodes[a.0].value.shape();
                let da = Matrix::filled(r, c, g.get(0, 0));
                self.accumulate(a, &da);
            }
            Op::SoftmaxXent {
                z,
                labels,
                mask,
                probs,
            } => {
                let z = *z;
                let gs = g.get(0, 0);
                let batch = probs.rows() as f64;
                let mut dz = probs.scale(gs / batch);
                for (b, &y) in labels.iter().enumerate() {
                    dz.set(b, y, dz.get(b, y) - gs / batch);
                }
                let _ = mask;
                self.accumulate(z, &dz);
            }
            Op::ClassMean { h, groups } => {
                let h = *h;
                let hm = &self.nodes[h.0].value;
                let mut dh = Matrix::zeros(hm.rows(), hm.cols());
                for (k, (_, rows)) in groups.iter().enumerate() {
                    let s = rows.len() as f64;
                    for &r in rows {
                        for j in 0..hm.cols() {
                            dh.set(r, j, dh.get(r, j) + g.get(k, j) / s);
                        }
                    }
                }
                self.accumulate(h, &dh);
            }
            Op::HebbUpdate {
                prev,
                h_tilde,
                eta,
                classes,
            } => {
                let (h_tilde, eta) = (*h_tilde, *eta);
                let eta_v = self.nodes[eta.0].value.get(0, 0);
                let ht = &self.nodes[h_tilde.0].value;
                let mut deta = 0.0;
                let mut dht = Matrix::zeros(ht.rows(), ht.cols());
                for (k, &c) in classes.iter().enumerate() {
                    for i in 0..prev.rows() {
                        let go = g.get(i, c);
                        deta += go * (ht.get(k, i) - prev.get(i, c));
                        dht.set(k, i, eta_v * go);
                    }
                }
                self.accumulate(eta, &Matrix::scalar(deta));
                self.accumulate(h_tilde, &dht);
            }
        }
    }
}
