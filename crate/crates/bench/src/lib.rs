//! Shared fixtures for the benchmarks.

use lreid_core::tensor::{randn, Matrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` Gaussian rows of width `d`.
pub fn features(n: usize, d: usize, seed: u64) -> Matrix {
    randn(n, d, 1.0, &mut rng(seed))
}

/// Identity labels with `per` consecutive samples each.
pub fn grouped_labels(n: usize, per: usize) -> Vec<usize> {
    (0..n).map(|i| i / per).collect()
}

/// Samples of `ids` identities scattered around random centres.
pub fn clustered(ids: usize, per: usize, d: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut r = rng(seed);
    let centres = randn(ids, d, 1.0, &mut r);
    let labels = grouped_labels(ids * per, per);
    let x = Matrix::from_shape_fn((ids * per, d), |(i, j)| centres[[labels[i], j]] + 0.5 * r.random::<f64>());
    (x, labels)
}
