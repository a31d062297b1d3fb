//! Dense `f64` matrix helpers shared by every layer.
//!
//! All tensors are row-major [`ndarray::Array2`] values; row vectors and
//! scalars are stored as `1 x n` and `1 x 1` matrices so that parameter
//! collections can be handled uniformly by the optimizer and checkpoints.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Matrix with i.i.d. `N(0, std^2)` entries.
pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn ensure_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} contains non-finite values")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn relu(m: &Matrix) -> Matrix {
    m.mapv(|v| v.max(0.0))
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(m: ArrayView2<f64>) -> Matrix {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(m: ArrayView2<f64>) -> Matrix {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Pairwise squared Euclidean distances between the rows of `a` and `b`.
pub fn pairwise_squared_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Matrix {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.axis_iter(Axis(0)).enumerate() {
        for (j, rb) in b.axis_iter(Axis(0)).enumerate() {
            out[[i, j]] = squared_distance(ra, rb);
        }
    }
    out
}

/// Cosine similarity between corresponding rows of `a` and every row of `b`.
pub fn cosine_matrix(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Matrix {
    let norm = |r: ArrayView1<f64>| r.dot(&r).sqrt();
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.axis_iter(Axis(0)).enumerate() {
        let na = norm(ra);
        for (j, rb) in b.axis_iter(Axis(0)).enumerate() {
            let nb = norm(rb);
            let denom = na * nb;
            out[[i, j]] = if denom > 0.0 {
                (ra.dot(&rb) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Select rows by index, allowing repeats.
pub fn gather_rows(m: ArrayView2<f64>, rows: &[usize]) -> Matrix {
    m.select(Axis(0), rows)
}

/// Order-stable checksum over the raw bit patterns of a matrix.
pub fn checksum(m: ArrayView2<f64>) -> u64 {
    m.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
