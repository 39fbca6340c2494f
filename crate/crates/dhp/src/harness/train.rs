//! Sequential training over a task stream, evaluation rows, diagnostics
//! and run persistence.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::benchmarks::idx::{load_idx, Dataset};
use crate::benchmarks::synth::synthetic_dataset;
use crate::benchmarks::tasks::{
    make_imbalanced_permuted_tasks, make_permuted_tasks, make_split_tasks, TaskSpec, TaskStream,
};
use crate::consolidation::{ConsolidationMethod, ImportanceState};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{BenchmarkId, RunConfig};
use crate::harness::metrics::{mean_sem, EvalMatrix};
use crate::layer::HebbGradMode;
use crate::model::{HeadKind, Mlp, MlpConfig, ParamRole};
use crate::ndcore::{Matrix, Tape};
use crate::seeding::{derive_rng, derive_seed};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiagEntry {
    pub step: usize,
    pub eta: f64,
    pub hebb_frobenius: f64,
    pub alpha_frobenius: f64,
}

/// Everything metric-like that must be bit-reproducible under a fixed
/// config and seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunMetrics {
    pub eval: EvalMatrix,
    pub avg_acc: f64,
    pub bwt: Option<f64>,
    pub diagnostics: Vec<DiagEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub trial: usize,
    pub metrics: RunMetrics,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub trial_avg_acc: Vec<f64>,
    pub trial_bwt: Vec<Option<f64>>,
    pub mean_acc: f64,
    pub sem_acc: f64,
    pub mean_bwt: Option<f64>,
    pub sem_bwt: Option<f64>,
}

fn find_idx_pair(dir: &Path, images: &str, labels: &str) -> Result<(PathBuf, PathBuf)> {
    let locate = |base: &str| -> Result<PathBuf> {
        for cand in [dir.join(base), dir.join(format!("{base}.gz"))] {
            if cand.exists() {
                return Ok(cand);
            }
        }
        Err(Error::Config(format!(
            "missing data file {base}[.gz] under {}",
            dir.display()
        )))
    };
    Ok((locate(images)?, locate(labels)?))
}

/// Resolve the train/test datasets for a run: synthetic, or MNIST IDX
/// files from `--data-dir` / `DHP_DATA_DIR` / `./data`.
pub fn load_benchmark_data(cfg: &RunConfig) -> Result<(Arc<Dataset>, Arc<Dataset>)> {
    if cfg.synthetic {
        let per_class = if cfg.fast { 120 } else { 600 };
        return Ok((
            Arc::new(synthetic_dataset(per_class, 784, derive_seed(cfg.seed, "synth", 0), 0)),
            Arc::new(synthetic_dataset(per_class / 4, 784, derive_seed(cfg.seed, "synth", 0), 1)),
        ));
    }
    let dir = cfg
        .data_dir
        .clone()
        .or_else(|| std::env::var_os("DHP_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    let (ti, tl) = find_idx_pair(&dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (ei, el) = find_idx_pair(&dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok((Arc::new(load_idx(&ti, &tl)?), Arc::new(load_idx(&ei, &el)?)))
}

pub fn build_task_stream(
    cfg: &RunConfig,
    train: Arc<Dataset>,
    test: Arc<Dataset>,
) -> Result<TaskStream> {
    let mut stream = match cfg.benchmark {
        BenchmarkId::Permuted => {
            make_permuted_tasks(train, test, cfg.n_tasks, cfg.seed, cfg.identity_first)?
        }
        BenchmarkId::Imbalanced => {
            make_imbalanced_permuted_tasks(train, test, cfg.n_tasks, cfg.seed, cfg.identity_first)?
        }
        BenchmarkId::Split => make_split_tasks(train, test)?,
    };
    if let Some(cap) = cfg.train_cap() {
        for task in &mut stream.tasks {
            if task.train_indices.len() > cap {
                let mut rng = derive_rng(cfg.seed, "fast-cap", task.index as u64);
                task.train_indices.shuffle(&mut rng);
                task.train_indices.truncate(cap);
                task.train_indices.sort_unstable();
            }
        }
    }
    Ok(stream)
}

pub fn build_model(cfg: &RunConfig, input_dim: usize, trial_seed: u64) -> Result<Mlp> {
    let head = if cfg.method.uses_dhp() {
        HeadKind::Dhp
    } else {
        // Capacity-matched baseline: extra slow weights in the output layer.
        HeadKind::PlainCapacityMatched
    };
    let mut rng = derive_rng(trial_seed, "init", 0);
    let mut model = Mlp::new(
        MlpConfig {
            input_dim,
            hidden: cfg.hidden.clone(),
            leaky_slope: cfg.leaky_slope,
            head,
            output_dim: crate::benchmarks::tasks::NUM_CLASSES,
            eta0: cfg.eta0,
        },
        &mut rng,
    )?;
    if cfg.hebb_grad_full {
        model.set_hebb_grad_mode(HebbGradMode::Full);
    }
    Ok(model)
}

fn slow_of(grads: &[Matrix], roles: &[ParamRole]) -> Vec<Matrix> {
    grads
        .iter()
        .zip(roles)
        .filter(|(_, &r)| r == ParamRole::SlowWeight)
        .map(|(g, _)| g.clone())
        .collect()
}

/// SGD over one task: cross-entropy (+ consolidation penalty on slow
/// weights), Hebbian trace updates every training batch, SI path
/// accumulation every step.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    model: &mut Mlp,
    train_ds: &Dataset,
    task: &TaskSpec,
    importance: &mut ImportanceState,
    cfg: &RunConfig,
    trial_seed: u64,
    global_step: &mut usize,
    diagnostics: &mut Vec<DiagEntry>,
) -> Result<()> {
    let roles: Vec<ParamRole> = model.registry().iter().map(|m| m.role).collect();
    let track_si = importance.method == ConsolidationMethod::Si;
    for epoch in 0..cfg.effective_epochs() {
        let mut order = task.train_indices.clone();
        let mut rng = derive_rng(
            trial_seed,
            "shuffle",
            (task.index as u64) << 32 | epoch as u64,
        );
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = task.materialize(train_ds, chunk);
            let mut tape = Tape::new();
            let graph = model.forward_on_tape(&mut tape, &x, Some(&y))?;
            let loss = tape.softmax_cross_entropy(graph.z, &y, Some(&task.mask))?;
            let total = tape.value(loss).get(0, 0) + importance.penalty(model);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    task: task.index,
                    step: *global_step,
                });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Matrix> = graph
                .param_vars
                .iter()
                .zip(model.registry())
                .map(|(v, meta)| match v {
                    Some(v) => tape.grad(*v),
                    None => Matrix::zeros(meta.rows, meta.cols),
                })
                .collect();
            for (g, p) in grads.iter_mut().zip(importance.penalty_grads(model)) {
                g.add_assign(&p);
            }
            if track_si {
                let slow_grads = slow_of(&grads, &roles);
                let slow_deltas: Vec<Matrix> =
                    slow_grads.iter().map(|g| g.scale(-cfg.lr)).collect();
                importance.si_accumulate_step(&slow_grads, &slow_deltas);
            }
            model.sgd_step(&grads, cfg.lr, cfg.clamp_eta);
            if let Some(hv) = graph.hebb_new {
                model.commit_hebb(tape.value(hv).clone());
            }
            *global_step += 1;
            if *global_step % cfg.log_every == 0 {
                if let Some(layer) = model.dhp_layer() {
                    diagnostics.push(DiagEntry {
                        step: *global_step,
                        eta: layer.eta,
                        hebb_frobenius: layer.hebb.frobenius_norm(),
                        alpha_frobenius: layer.alpha.frobenius_norm(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// End-of-task importance update; no-op without a consolidation method.
pub fn consolidate_after_task(
    model: &Mlp,
    stream: &TaskStream,
    task: &TaskSpec,
    importance: &mut ImportanceState,
) -> Result<()> {
    match importance.method {
        ConsolidationMethod::None => Ok(()),
        ConsolidationMethod::Si => importance.si_consolidate(model),
        ConsolidationMethod::OnlineEwc => importance.ewc_consolidate(
            model,
            task.train_batches(&stream.train, 256),
            Some(&task.mask),
        ),
        ConsolidationMethod::Mas => importance.mas_consolidate(
            model,
            task.train_batches(&stream.train, 256),
            Some(&task.mask),
        ),
    }
}

/// Test accuracy on one task with that task's transform and label mask.
pub fn evaluate_task(model: &Mlp, test_ds: &Dataset, task: &TaskSpec, eval_batch: usize) -> f64 {
    let mut correct = 0usize;
    for chunk in task.test_indices.chunks(eval_batch) {
        let (x, y) = task.materialize(test_ds, chunk);
        let z = model.forward_eval(&x);
        for (r, &label) in y.iter().enumerate() {
            let mut best = None::<(usize, f64)>;
            for j in 0..z.cols() {
                if !task.mask[j] {
                    continue;
                }
                let v = z.get(r, j);
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            if best.map(|(j, _)| j) == Some(label) {
                correct += 1;
            }
        }
    }
    correct as f64 / task.test_indices.len() as f64
}

/// Accuracy on every task seen so far (1..=upto).
pub fn evaluate_row(model: &Mlp, stream: &TaskStream, upto: usize, eval_batch: usize) -> Vec<f64> {
    stream.tasks[..upto]
        .iter()
        .map(|task| evaluate_task(model, &stream.test, task, eval_batch))
        .collect()
}

/// One full sequential trial; returns the record and the final model +
/// importance state for checkpointing.
pub fn run_trial(
    cfg: &RunConfig,
    stream: &TaskStream,
    trial: usize,
) -> Result<(RunRecord, Mlp, ImportanceState)> {
    let started = Instant::now();
    let trial_seed = derive_seed(cfg.seed, "trial", trial as u64);
    let mut model = build_model(cfg, stream.train.feature_dim(), trial_seed)?;
    let mut importance = ImportanceState::new(
        cfg.method.consolidation(),
        cfg.lambda,
        cfg.xi,
        cfg.gamma,
        &model,
    )?;
    let mut eval = EvalMatrix::new();
    let mut diagnostics = Vec::new();
    let mut global_step = 0usize;
    for t in 0..stream.tasks.len() {
        let task = &stream.tasks[t];
        train_task(
            &mut model,
            &stream.train,
            task,
            &mut importance,
            cfg,
            trial_seed,
            &mut global_step,
            &mut diagnostics,
        )?;
        consolidate_after_task(&model, stream, task, &mut importance)?;
        eval.push_row(evaluate_row(&model, stream, t + 1, cfg.eval_batch));
    }
    let done = eval.tasks_done();
    let metrics = RunMetrics {
        avg_acc: eval.avg_acc(done),
        bwt: eval.bwt(done),
        eval,
        diagnostics,
    };
    let record = RunRecord {
        config: cfg.clone(),
        trial,
        metrics,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((record, model, importance))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csvs(dir: &Path, record: &RunRecord) -> Result<()> {
    let n = record.metrics.eval.tasks_done();
    let mut acc = String::from("after_task");
    for i in 1..=n {
        acc.push_str(&format!(",task{i}"));
    }
    acc.push('\n');
    for t in 1..=n {
        acc.push_str(&t.to_string());
        let row = record.metrics.eval.row(t);
        for i in 0..n {
            acc.push(',');
            if i < row.len() {
                acc.push_str(&format!("{:.6}", row[i]));
            }
        }
        acc.push('\n');
    }
    write_text(&dir.join("accuracy_matrix.csv"), &acc)?;

    let mut diag = String::from("step,eta,hebb_frobenius,alpha_frobenius\n");
    for e in &record.metrics.diagnostics {
        diag.push_str(&format!(
            "{},{:.9},{:.9},{:.9}\n",
            e.step, e.eta, e.hebb_frobenius, e.alpha_frobenius
        ));
    }
    write_text(&dir.join("diagnostics.csv"), &diag)
}

/// Run all trials of a config; persists per-trial outputs and a summary
/// when `out_dir` is set.
pub fn run_experiment(cfg: &RunConfig) -> Result<(RunSummary, Vec<RunRecord>)> {
    cfg.validate()?;
    let (train, test) = load_benchmark_data(cfg)?;
    let stream = build_task_stream(cfg, train, test)?;
    let mut records = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let (mut record, model, importance) = run_trial(cfg, &stream, trial)?;
        if let Some(out_dir) = &cfg.out_dir {
            let dir = out_dir.join(format!("trial_{trial}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let ckpt_path = dir.join("checkpoint.bin");
            Checkpoint::from_model(&model, Some(&importance)).save(&ckpt_path)?;
            record.checkpoint = Some(ckpt_path.display().to_string());
            write_csvs(&dir, &record)?;
            write_text(
                &dir.join("run.json"),
                &serde_json::to_string_pretty(&record)?,
            )?;
        }
        records.push(record);
    }
    let trial_avg_acc: Vec<f64> = records.iter().map(|r| r.metrics.avg_acc).collect();
    let trial_bwt: Vec<Option<f64>> = records.iter().map(|r| r.metrics.bwt).collect();
    let (mean_acc, sem_acc) = mean_sem(&trial_avg_acc);
    let bwts: Vec<f64> = trial_bwt.iter().flatten().copied().collect();
    let (mean_bwt, sem_bwt) = if bwts.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_sem(&bwts);
        (Some(m), Some(s))
    };
    let summary = RunSummary {
        config: cfg.clone(),
        trial_avg_acc,
        trial_bwt,
        mean_acc,
        sem_acc,
        mean_bwt,
        sem_bwt,
    };
    if let Some(out_dir) = &cfg.out_dir {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        write_text(
            &out_dir.join("summary.json"),
            &serde_json::to_string_pretty(&summary)?,
        )?;
    }
    Ok((summary, records))
}
