//! Deterministic synthetic datasets for tests and the `--fast` profile
//! when no real data is on disk.
//!
//! Each class gets a random prototype image; samples are noisy copies,
//! quantized to u8 like real pixel data so IDX round-trips are exact.

use rand::Rng;

use crate::benchmarks::idx::{encode_idx_images, encode_idx_labels, Dataset};
use crate::ndcore::Matrix;
use crate::seeding::derive_rng;

/// `n_per_class` samples for each of 10 classes over `dim` features.
/// `dim` must be a perfect square if the dataset will be written as IDX.
///
/// The class prototypes depend only on `seed`, so two datasets built from
/// the same seed but different `noise_stream`s (e.g. a train/test split)
/// share classes while holding disjoint samples.
pub fn synthetic_dataset(n_per_class: usize, dim: usize, seed: u64, noise_stream: u64) -> Dataset {
    let (pixels, labels) = synthetic_pixels(n_per_class, dim, seed, noise_stream);
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Dataset {
        images: Matrix::from_vec(labels.len(), dim, data),
        labels: labels.iter().map(|&l| l as usize).collect(),
    }
}

pub fn synthetic_pixels(
    n_per_class: usize,
    dim: usize,
    seed: u64,
    noise_stream: u64,
) -> (Vec<u8>, Vec<u8>) {
    let mut proto_rng = derive_rng(seed, "synth-proto", 0);
    let protos: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..dim).map(|_| proto_rng.gen::<f64>()).collect())
        .collect();
    let mut rng = derive_rng(seed, "synth-noise", noise_stream);
    let mut pixels = Vec::with_capacity(10 * n_per_class * dim);
    let mut labels = Vec::with_capacity(10 * n_per_class);
    // Interleave classes so any prefix of the dataset stays balanced.
    for i in 0..n_per_class {
        let _ = i;
        for c in 0..10u8 {
            for &p in &protos[c as usize] {
                let v = (p + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0);
                pixels.push((v * 255.0).round() as u8);
            }
            labels.push(c);
        }
    }
    (pixels, labels)
}

/// Write a synthetic dataset as a standard IDX pair; returns the paths.
pub fn write_synthetic_idx(
    dir: &std::path::Path,
    prefix: &str,
    n_per_class: usize,
    side: usize,
    seed: u64,
    noise_stream: u64,
) -> std::io::Result<(std::path::PathBuf, std::path::PathBuf)> {
    let (pixels, labels) = synthetic_pixels(n_per_class, side * side, seed, noise_stream);
    let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    std::fs::write(
        &images_path,
        encode_idx_images(labels.len(), side, side, &pixels),
    )?;
    std::fs::write(&labels_path, encode_idx_labels(&labels))?;
    Ok((images_path, labels_path))
}
