//! Deterministic seed derivation.
//!
//! One master seed fans out into independent, reproducible streams keyed by
//! a purpose tag and an index (trial number, task number, epoch). Ablations
//! that share a master seed therefore share permutations and imbalance draws
//! while still getting distinct init/shuffle streams per trial.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut acc = splitmix(master);
    for &b in tag.as_bytes() {
        acc = splitmix(acc ^ b as u64);
    }
    splitmix(acc ^ index)
}

pub fn derive_rng(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
