//! Training objectives and their gradients.
//!
//! Each loss returns its scalar value together with the gradient with
//! respect to its differentiable input, so the trainer can route gradients
//! to the right parameter group.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, sigmoid, softmax_rows, softplus, squared_distance, Matrix};

/// Trade-off factors of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Distillation weight `gamma`.
    pub gamma: f64,
    /// Plasticity weight `lambda_p`.
    pub lambda_p: f64,
    /// Stability weight `lambda_s`.
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda_p: 1.0,
            lambda_s: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda_p", self.lambda_p), ("lambda_s", self.lambda_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss value and the gradient with respect to its input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

/// Mean negative log-likelihood of the true labels.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<LossValue> {
    let (n, c) = logits.dim();
    if n != labels.len() || n == 0 {
        return Err(Error::Argument(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Argument(format!("label {bad} outside [0, {c})")));
    }
    let log_probs = log_softmax_rows(logits);
    let value = -labels.iter().enumerate().map(|(i, &y)| log_probs[[i, y]]).sum::<f64>() / n as f64;
    let mut grad = log_probs.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] -= 1.0;
    }
    grad /= n as f64;
    Ok(LossValue { value, grad })
}

/// Soft-target distillation over the first `n_old` classes: mean over the
/// batch of `-sum_j softmax(old)_j log softmax(new)_j`.
///
/// The gradient has the full width of `new_logits`; columns past `n_old`
/// are zero.
pub fn distillation(new_logits: ArrayView2<f64>, old_logits: ArrayView2<f64>, n_old: usize) -> Result<LossValue> {
    if n_old == 0 {
        return Err(Error::Argument("distillation needs at least one old class".into()));
    }
    let n = new_logits.nrows();
    if old_logits.nrows() != n || new_logits.ncols() < n_old || old_logits.ncols() < n_old || n == 0 {
        return Err(Error::Argument(format!(
            "distillation over {n_old} classes with new logits {:?} and old logits {:?}",
            new_logits.shape(),
            old_logits.shape()
        )));
    }
    let targets = softmax_rows(old_logits.slice(s![.., ..n_old]));
    let new_old = new_logits.slice(s![.., ..n_old]);
    let log_probs = log_softmax_rows(new_old);
    let value = -(&targets * &log_probs).sum() / n as f64;
    let mut grad = Array2::zeros(new_logits.raw_dim());
    let probs = softmax_rows(new_old);
    grad.slice_mut(s![.., ..n_old]).assign(&((&probs - &targets) / n as f64));
    Ok(LossValue { value, grad })
}

/// `L_c + gamma L_d`; pass `None` for the distillation term on the first domain.
pub fn base_loss(cross_entropy: f64, distillation: Option<f64>, gamma: f64) -> f64 {
    match distillation {
        Some(d) => cross_entropy + gamma * d,
        None => cross_entropy,
    }
}

pub fn total_loss(base: f64, plasticity: f64, stability: f64, weights: &LossWeights) -> f64 {
    base + weights.lambda_p * plasticity + weights.lambda_s * stability
}

/// Anchor, hardest positive and hardest negative indices into a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TripletIndex {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Batch-hard mining under squared Euclidean distance.
///
/// Every anchor that has at least one positive and one negative contributes
/// one triplet: its farthest positive and nearest negative. Ties go to the
/// lowest index.
pub fn mine_triplets(features: ArrayView2<f64>, labels: &[usize]) -> Vec<TripletIndex> {
    let n = labels.len();
    let mut triplets = Vec::new();
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let dist = squared_distance(features.row(a), features.row(j));
            if labels[j] == labels[a] {
                if hardest_pos.is_none_or(|(_, best)| dist > best) {
                    hardest_pos = Some((j, dist));
                }
            } else if hardest_neg.is_none_or(|(_, best)| dist < best) {
                hardest_neg = Some((j, dist));
            }
        }
        if let (Some((positive, _)), Some((negative, _))) = (hardest_pos, hardest_neg) {
            triplets.push(TripletIndex {
                anchor: a,
                positive,
                negative,
            });
        }
    }
    triplets
}

/// `(1/N^b) sum softplus(D(a,p) - D(a,n))` with `D` the squared Euclidean
/// distance; `N^b` is the number of rows of `features`.
pub fn plasticity_loss(features: ArrayView2<f64>, triplets: &[TripletIndex]) -> LossValue {
    let n = features.nrows();
    let mut grad = Array2::zeros(features.raw_dim());
    if triplets.is_empty() || n == 0 {
        return LossValue { value: 0.0, grad };
    }
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    for t in triplets {
        let fa = features.row(t.anchor);
        let fp = features.row(t.positive);
        let fnn = features.row(t.negative);
        let margin = squared_distance(fa, fp) - squared_distance(fa, fnn);
        value += softplus(margin);
        let w = scale * sigmoid(margin);
        for k in 0..features.ncols() {
            let dp = fa[k] - fp[k];
            let dn = fa[k] - fnn[k];
            grad[[t.anchor, k]] += w * 2.0 * (dp - dn);
            grad[[t.positive, k]] -= w * 2.0 * dp;
            grad[[t.negative, k]] += w * 2.0 * dn;
        }
    }
    LossValue {
        value: value * scale,
        grad,
    }
}

/// `(1/N^K) sum_i softplus(||V_i - V̂_i||^2)`; the gradient is with respect
/// to `vertices`.
pub fn stability_loss(vertices: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<LossValue> {
    if vertices.dim() != reference.dim() || vertices.nrows() == 0 {
        return Err(Error::Argument(format!(
            "stability loss shapes differ: {:?} vs {:?}",
            vertices.shape(),
            reference.shape()
        )));
    }
    let nk = vertices.nrows() as f64;
    let mut grad = Array2::zeros(vertices.raw_dim());
    let mut value = 0.0;
    for i in 0..vertices.nrows() {
        let dist = squared_distance(vertices.row(i), reference.row(i));
        value += softplus(dist);
        let w = sigmoid(dist) * 2.0 / nk;
        for k in 0..vertices.ncols() {
            grad[[i, k]] = w * (vertices[[i, k]] - reference[[i, k]]);
        }
    }
    Ok(LossValue {
        value: value / nk,
        grad,
    })
}

/// Similarity-preserving feature distillation:
/// `(1/b^2) ||norm(Q Q^T) - norm(Q̂ Q̂^T)||_F^2` with row-wise L2
/// normalization. The gradient is with respect to `features`.
pub fn similarity_preserving(features: ArrayView2<f64>, old_features: ArrayView2<f64>) -> Result<LossValue> {
    if features.dim() != old_features.dim() || features.nrows() == 0 {
        return Err(Error::Argument(format!(
            "similarity distillation shapes differ: {:?} vs {:?}",
            features.shape(),
            old_features.shape()
        )));
    }
    let b = features.nrows() as f64;
    let gram = features.dot(&features.t());
    let (norm_new, row_norms) = row_normalize(&gram);
    let (norm_old, _) = row_normalize(&old_features.dot(&old_features.t()));
    let diff = &norm_new - &norm_old;
    let value = diff.iter().map(|v| v * v).sum::<f64>() / (b * b);
    let d_norm = diff * (2.0 / (b * b));
    let mut d_gram = Array2::zeros(gram.raw_dim());
    for i in 0..gram.nrows() {
        let nrm = row_norms[i];
        if nrm == 0.0 {
            continue;
        }
        let dot: f64 = norm_new.row(i).dot(&d_norm.row(i));
        for j in 0..gram.ncols() {
            d_gram[[i, j]] = (d_norm[[i, j]] - norm_new[[i, j]] * dot) / nrm;
        }
    }
    let grad = (&d_gram + &d_gram.t()).dot(&features);
    Ok(LossValue { value, grad })
}

fn row_normalize(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let nrm = row.dot(&row).sqrt();
        norms.push(nrm);
        if nrm > 0.0 {
            row.mapv_inplace(|v| v / nrm);
        }
    }
    (out, norms)
}
