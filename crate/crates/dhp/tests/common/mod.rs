//! Shared finite-difference gradient checking machinery; used by both the
//! gradient test suite and the acceptance suite.
#![allow(dead_code)]

use rand::Rng;

use dhp::layer::HebbGradMode;
use dhp::model::{Head, HeadKind, Mlp, MlpConfig, ParamRole};
use dhp::ndcore::{Matrix, Tape};

const EPS: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

pub struct Instance {
    pub model: Mlp,
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub mask: Option<Vec<bool>>,
}

/// Training-mode loss value at the model's current parameters.
pub fn loss_at(inst: &Instance, model: &Mlp) -> f64 {
    let mut tape = Tape::new();
    let graph = model
        .forward_on_tape(&mut tape, &inst.x, Some(&inst.labels))
        .unwrap();
    let loss = tape
        .softmax_cross_entropy(graph.z, &inst.labels, inst.mask.as_deref())
        .unwrap();
    tape.value(loss).get(0, 0)
}

/// Hidden output (after activations) of the backbone.
pub fn hidden_out(model: &Mlp, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for layer in &model.layers {
        let a = h.matmul(&layer.weight).unwrap();
        h = Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            let v = a.get(i, j) + layer.bias.get(0, j);
            if v >= 0.0 {
                v
            } else {
                model.config.leaky_slope * v
            }
        });
    }
    h
}

/// Mean masked softmax cross-entropy, pure math.
pub fn xent(z: &Matrix, labels: &[usize], mask: Option<&[bool]>) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let active = |j: usize| mask.map_or(true, |m| m[j]);
        let mx = (0..z.cols())
            .filter(|&j| active(j))
            .map(|j| z.get(r, j))
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = mx
            + (0..z.cols())
                .filter(|&j| active(j))
                .map(|j| (z.get(r, j) - mx).exp())
                .sum::<f64>()
                .ln();
        total += lse - z.get(r, y);
    }
    total / labels.len() as f64
}

/// Loss with the per-class means frozen at base-model values. This is the
/// function whose exact derivative the detach-means mode computes: the
/// trace update's dependence on the hidden activations is cut, while its
/// dependence on the plasticity rate is kept.
pub fn loss_at_frozen_means(inst: &Instance, model: &Mlp, means: &Matrix, classes: &[usize]) -> f64 {
    let h = hidden_out(model, &inst.x);
    let l = model.dhp_layer().unwrap();
    let mut hebb = l.hebb.clone();
    for (k, &c) in classes.iter().enumerate() {
        for i in 0..hebb.rows() {
            let v = (1.0 - l.eta) * hebb.get(i, c) + l.eta * means.get(k, i);
            hebb.set(i, c, v);
        }
    }
    let w = l.theta.add(&l.alpha.hadamard(&hebb).unwrap()).unwrap();
    let z = h.matmul(&w).unwrap();
    let z = Matrix::from_fn(z.rows(), z.cols(), |i, j| {
        z.get(i, j) + model.head_bias.get(0, j)
    });
    xent(&z, &inst.labels, inst.mask.as_deref())
}

/// Registry-aligned analytic gradients from one backward pass.
pub fn analytic_grads(inst: &Instance) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let graph = inst
        .model
        .forward_on_tape(&mut tape, &inst.x, Some(&inst.labels))
        .unwrap();
    let loss = tape
        .softmax_cross_entropy(graph.z, &inst.labels, inst.mask.as_deref())
        .unwrap();
    tape.backward(loss).unwrap();
    inst.model
        .registry()
        .iter()
        .zip(&graph.param_vars)
        .map(|(meta, var)| match var {
            Some(v) => tape.grad(*v).clone(),
            None => Matrix::zeros(meta.rows, meta.cols),
        })
        .collect()
}

/// Hidden pre-activations of every layer, for kink detection.
pub fn preactivations(model: &Mlp, x: &Matrix) -> Vec<Matrix> {
    let mut h = x.clone();
    let mut out = Vec::new();
    for layer in &model.layers {
        let a = h.matmul(&layer.weight).unwrap();
        let a = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + layer.bias.get(0, j));
        h = Matrix::from_fn(a.rows(), a.cols(), |i, j| {
            let v = a.get(i, j);
            if v >= 0.0 {
                v
            } else {
                model.config.leaky_slope * v
            }
        });
        out.push(a);
    }
    out
}

/// Central differences are invalid when a ReLU kink lies between the two
/// evaluation points; detect that by a pre-activation sign flip.
pub fn crosses_kink(inst: &Instance, plus: &Mlp, minus: &Mlp) -> bool {
    let ap = preactivations(plus, &inst.x);
    let am = preactivations(minus, &inst.x);
    ap.iter().zip(&am).any(|(p, m)| {
        p.data()
            .iter()
            .zip(m.data().iter())
            .any(|(a, b)| (*a >= 0.0) != (*b >= 0.0))
    })
}

pub fn check_instance(inst: &Instance, rng: &mut impl Rng) {
    let grads = analytic_grads(inst);
    let registry = inst.model.registry();
    let base_values = inst.model.param_values();
    let detach = matches!(
        inst.model.dhp_layer(),
        Some(l) if l.grad_mode == HebbGradMode::DetachMeans
    );
    let frozen = detach.then(|| {
        let h = hidden_out(&inst.model, &inst.x);
        let groups =
            dhp::layer::group_by_class(&inst.labels, inst.model.config.output_dim).unwrap();
        let classes: Vec<usize> = groups.iter().map(|(c, _)| *c).collect();
        let means = Matrix::from_fn(groups.len(), h.cols(), |k, i| {
            let rows = &groups[k].1;
            rows.iter().map(|&r| h.get(r, i)).sum::<f64>() / rows.len() as f64
        });
        // The frozen-means loss must agree with the tape loss at the base
        // point; this pins the pure-math reference to the graph's semantics.
        let base = loss_at_frozen_means(inst, &inst.model, &means, &classes);
        assert!((base - loss_at(inst, &inst.model)).abs() < 1e-12);
        (means, classes)
    });
    let numeric_loss = |model: &Mlp| match &frozen {
        Some((means, classes)) => loss_at_frozen_means(inst, model, means, classes),
        None => loss_at(inst, model),
    };
    for (k, meta) in registry.iter().enumerate() {
        if meta.role == ParamRole::State {
            continue;
        }
        let n = meta.rows * meta.cols;
        // Check every entry of small tensors, a random sample of larger ones.
        let picks: Vec<usize> = if n <= 12 {
            (0..n).collect()
        } else {
            (0..6).map(|_| rng.gen_range(0..n)).collect()
        };
        for idx in picks {
            let (i, j) = (idx / meta.cols, idx % meta.cols);
            let mut plus = inst.model.clone();
            let mut minus = inst.model.clone();
            let mut vp = base_values.clone();
            let mut vm = base_values.clone();
            let base = base_values[k].get(i, j);
            vp[k].set(i, j, base + EPS);
            vm[k].set(i, j, base - EPS);
            plus.set_param_values(&vp);
            minus.set_param_values(&vm);
            if crosses_kink(inst, &plus, &minus) {
                continue;
            }
            let numeric = (numeric_loss(&plus) - numeric_loss(&minus)) / (2.0 * EPS);
            let analytic = grads[k].get(i, j);
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < REL_TOL,
                "{}[{},{}]: analytic {analytic:.8e} vs numeric {numeric:.8e} (rel {rel:.2e})",
                meta.name,
                i,
                j
            );
        }
    }
}

pub fn random_instance(rng: &mut impl Rng, head: HeadKind, full_grad: bool) -> Instance {
    let d = rng.gen_range(2..=5);
    let config = MlpConfig {
        input_dim: rng.gen_range(2..=6),
        hidden: (0..rng.gen_range(1..=2))
            .map(|_| rng.gen_range(2..=5))
            .collect(),
        leaky_slope: 0.01,
        head,
        output_dim: d,
        eta0: rng.gen_range(0.05..0.9),
    };
    let mut model = Mlp::new(config.clone(), rng).unwrap();
    if let Head::Dhp(l) = &mut model.head {
        // Nonzero traces and alpha so every gradient path is exercised.
        l.hebb = Matrix::from_fn(l.theta.rows(), d, |_, _| rng.gen_range(-1.0..1.0));
        l.alpha = Matrix::from_fn(l.theta.rows(), d, |_, _| rng.gen_range(-0.5..0.5));
        l.grad_mode = if full_grad {
            HebbGradMode::Full
        } else {
            HebbGradMode::DetachMeans
        };
    }
    let b = rng.gen_range(1..=6);
    let x = Matrix::from_fn(b, config.input_dim, |_, _| rng.gen_range(-1.0..1.0));
    let (labels, mask) = if rng.gen_bool(0.3) && d >= 3 {
        // Task mask covering a strict subset of classes.
        let active = [0usize, 1];
        let mut mask = vec![false; d];
        for &c in &active {
            mask[c] = true;
        }
        let labels = (0..b).map(|_| active[rng.gen_range(0..2)]).collect();
        (labels, Some(mask))
    } else {
        ((0..b).map(|_| rng.gen_range(0..d)).collect(), None)
    };
    Instance {
        model,
        x,
        labels,
        mask,
    }
}

