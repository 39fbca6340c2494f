//! Task-stream construction: Permuted MNIST, Imbalanced Permuted MNIST and
//! Split MNIST.
//!
//! Tasks never copy the dataset: each task holds an optional pixel
//! permutation, index lists into the shared train/test sets and an
//! active-label mask. Batches are materialized on demand.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::benchmarks::idx::Dataset;
use crate::error::Result;
use crate::ndcore::Matrix;
use crate::seeding::derive_rng;

pub const NUM_CLASSES: usize = 10;

#[derive(Clone, Debug)]
pub struct TaskSpec {
    /// 1-based task index.
    pub index: usize,
    /// Pixel permutation applied to both splits; `None` means identity.
    pub permutation: Option<Arc<Vec<usize>>>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Active output columns for this task.
    pub mask: Vec<bool>,
    pub n_max: usize,
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSpec {
    /// Gather the given dataset rows, applying this task's permutation.
    pub fn materialize(&self, ds: &Dataset, rows: &[usize]) -> (Matrix, Vec<usize>) {
        let dim = ds.feature_dim();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            let src = ds.images.row_slice(r);
            match &self.permutation {
                Some(p) => data.extend(p.iter().map(|&j| src[j])),
                None => data.extend_from_slice(src),
            }
        }
        let labels = rows.iter().map(|&r| ds.labels[r]).collect();
        (Matrix::from_vec(rows.len(), dim, data), labels)
    }

    /// Full training split in batches of `batch_size`, in index order.
    pub fn train_batches<'a>(
        &'a self,
        ds: &'a Dataset,
        batch_size: usize,
    ) -> impl Iterator<Item = (Matrix, Vec<usize>)> + 'a {
        self.train_indices
            .chunks(batch_size)
            .map(move |chunk| self.materialize(ds, chunk))
    }
}

fn random_permutation(dim: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..dim).collect();
    p.shuffle(rng);
    p
}

fn all_indices(ds: &Dataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

/// Permuted tasks: every task applies its own seed-derived pixel
/// permutation to both splits; all ten labels stay active.
pub fn make_permuted_tasks(
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    n_max: usize,
    master_seed: u64,
    identity_first: bool,
) -> Result<TaskStream> {
    let dim = train.feature_dim();
    let mut tasks = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let permutation = if n == 1 && identity_first {
            None
        } else {
            let mut rng = derive_rng(master_seed, "perm", n as u64);
            Some(Arc::new(random_permutation(dim, &mut rng)))
        };
        tasks.push(TaskSpec {
            index: n,
            permutation,
            train_indices: all_indices(&train),
            test_indices: all_indices(&test),
            mask: vec![true; NUM_CLASSES],
            n_max,
        });
    }
    Ok(TaskStream { train, test, tasks })
}

/// Per-class removal probabilities for an imbalanced task, drawn once from
/// U(0,1) per (master seed, task). Shared by every method run under the
/// same master seed.
pub fn removal_probabilities(master_seed: u64, task_index: usize) -> Vec<f64> {
    let mut rng = derive_rng(master_seed, "imbalance-p", task_index as u64);
    (0..NUM_CLASSES).map(|_| rng.gen::<f64>()).collect()
}

/// Imbalanced permuted tasks: per task and class, a removal probability is
/// drawn from U(0,1) and each training sample of that class is dropped
/// independently with that probability. Test splits stay full. A class that
/// would empty out keeps its first sample.
pub fn make_imbalanced_permuted_tasks(
    train: Arc<Dataset>,
    test: Arc<Dataset>,
    n_max: usize,
    master_seed: u64,
    identity_first: bool,
) -> Result<TaskStream> {
    let mut stream =
        make_permuted_tasks(train.clone(), test, n_max, master_seed, identity_first)?;
    for task in &mut stream.tasks {
        let removal = removal_probabilities(master_seed, task.index);
        let mut rng = derive_rng(master_seed, "imbalance-keep", task.index as u64);
        let mut kept: Vec<usize> = Vec::new();
        for &r in &task.train_indices {
            let p = removal[train.labels[r]];
            if rng.gen::<f64>() >= p {
                kept.push(r);
            }
        }
        // Floor: never let a class vanish entirely.
        for c in 0..NUM_CLASSES {
            if !kept.iter().any(|&r| train.labels[r] == c) {
                if let Some(&first) = task.train_indices.iter().find(|&&r| train.labels[r] == c) {
                    kept.push(first);
                }
            }
        }
        task.train_indices = kept;
    }
    Ok(stream)
}

/// Split tasks: five binary problems {0,1},{2,3},{4,5},{6,7},{8,9} over a
/// shared 10-way head with disjoint active-label masks.
pub fn make_split_tasks(train: Arc<Dataset>, test: Arc<Dataset>) -> Result<TaskStream> {
    let mut tasks = Vec::with_capacity(5);
    for n in 1..=5usize {
        let pair = [2 * (n - 1), 2 * (n - 1) + 1];
        let mut mask = vec![false; NUM_CLASSES];
        mask[pair[0]] = true;
        mask[pair[1]] = true;
        let filter = |ds: &Dataset| -> Vec<usize> {
            (0..ds.len()).filter(|&r| mask[ds.labels[r]]).collect()
        };
        tasks.push(TaskSpec {
            index: n,
            permutation: None,
            train_indices: filter(&train),
            test_indices: filter(&test),
            mask,
            n_max: 5,
        });
    }
    Ok(TaskStream { train, test, tasks })
}
