//! Knowledge-graph memory: the instance similarity graph built per batch,
//! the persistent accumulated knowledge graph, their joint graph, and one
//! layer of GCN propagation producing enhanced batch representations.
//!
//! Every forward operation has a matching hand-written backward pass so the
//! memory parameters can be trained without an autodiff framework.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Parameterized;
use crate::error::{Error, Result};
use crate::tensor::{cosine_matrix, ensure_finite, randn, sigmoid, Matrix};

/// Learnable edge parameters `(W, b)` of a sigmoid-of-weighted-L1 adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    /// `1 x d` row weight.
    pub weight: Matrix,
    /// `1 x 1` scalar bias.
    pub bias: Matrix,
}

impl EdgeParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: randn(1, dim, std, rng),
            bias: Array2::zeros((1, 1)),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Array2::zeros((1, dim)),
            bias: Array2::zeros((1, 1)),
        }
    }

    pub fn bias_value(&self) -> f64 {
        self.bias[[0, 0]]
    }
}

/// `A_ij = sigmoid(W . |v_i - v_j| + b)` over all row pairs.
///
/// Only the upper triangle is computed; the lower one is mirrored so the
/// result is exactly symmetric.
pub fn l1_adjacency(vertices: ArrayView2<f64>, edge: &EdgeParams) -> Result<Matrix> {
    let n = vertices.nrows();
    if vertices.ncols() != edge.weight.ncols() {
        return Err(Error::Config(format!(
            "edge weight width {} does not match vertex width {}",
            edge.weight.ncols(),
            vertices.ncols()
        )));
    }
    ensure_finite(vertices, "graph vertices")?;
    ensure_finite(edge.weight.view(), "edge weight")?;
    ensure_finite(edge.bias.view(), "edge bias")?;
    let w = edge.weight.row(0);
    let b = edge.bias_value();
    let mut adj = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let score: f64 = vertices
                .row(i)
                .iter()
                .zip(vertices.row(j).iter())
                .zip(w.iter())
                .map(|((a, c), wk)| wk * (a - c).abs())
                .sum();
            let value = sigmoid(score + b);
            adj[[i, j]] = value;
            adj[[j, i]] = value;
        }
    }
    Ok(adj)
}

/// Backward of [`l1_adjacency`]: returns `(d_vertices, d_weight, d_bias)`.
fn l1_adjacency_backward(
    vertices: ArrayView2<f64>,
    edge: &EdgeParams,
    adj: &Matrix,
    grad_adj: ArrayView2<f64>,
) -> (Matrix, Matrix, Matrix) {
    let (n, d) = vertices.dim();
    let w = edge.weight.row(0);
    let mut d_vertices = Array2::zeros((n, d));
    let mut d_weight = Array2::zeros((1, d));
    let mut d_bias = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = adj[[i, j]];
            let g = grad_adj[[i, j]] * a * (1.0 - a);
            if g == 0.0 {
                continue;
            }
            d_bias += g;
            for k in 0..d {
                let diff = vertices[[i, k]] - vertices[[j, k]];
                d_weight[[0, k]] += g * diff.abs();
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let local = g * w[k] * sign;
                d_vertices[[i, k]] += local;
                d_vertices[[j, k]] -= local;
            }
        }
    }
    (d_vertices, d_weight, Array2::from_elem((1, 1), d_bias))
}

/// Instance-based similarity graph over one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    pub vertices: Matrix,
    pub adjacency: Matrix,
}

pub fn build_isg(features: ArrayView2<f64>, edge: &EdgeParams) -> Result<SimilarityGraph> {
    if features.nrows() < 2 {
        return Err(Error::Argument(format!(
            "similarity graph needs at least 2 samples, got {}",
            features.nrows()
        )));
    }
    Ok(SimilarityGraph {
        vertices: features.to_owned(),
        adjacency: l1_adjacency(features, edge)?,
    })
}

pub fn akg_adjacency(vertices: ArrayView2<f64>, edge: &EdgeParams) -> Result<Matrix> {
    if vertices.nrows() == 0 {
        return Err(Error::Argument("knowledge graph needs at least one vertex".into()));
    }
    l1_adjacency(vertices, edge)
}

/// Cross-graph weights `softmax_j(-||v_i - k_j||^2 / 2)`.
pub fn cross_weights(features: ArrayView2<f64>, vertices: ArrayView2<f64>) -> Result<Matrix> {
    if vertices.nrows() == 0 {
        return Err(Error::Argument("knowledge graph needs at least one vertex".into()));
    }
    if features.ncols() != vertices.ncols() {
        return Err(Error::Config(format!(
            "feature width {} does not match vertex width {}",
            features.ncols(),
            vertices.ncols()
        )));
    }
    ensure_finite(features, "batch features")?;
    ensure_finite(vertices, "knowledge vertices")?;
    let scores = crate::tensor::pairwise_squared_distances(features, vertices).mapv(|d| -0.5 * d);
    Ok(crate::tensor::softmax_rows(scores.view()))
}

/// Backward of [`cross_weights`]: returns `(d_features, d_vertices)`.
fn cross_weights_backward(
    features: ArrayView2<f64>,
    vertices: ArrayView2<f64>,
    cross: &Matrix,
    grad_cross: ArrayView2<f64>,
) -> (Matrix, Matrix) {
    let (nb, d) = features.dim();
    let nk = vertices.nrows();
    let mut d_features = Array2::zeros((nb, d));
    let mut d_vertices = Array2::zeros((nk, d));
    for i in 0..nb {
        let inner: f64 = (0..nk).map(|l| grad_cross[[i, l]] * cross[[i, l]]).sum();
        for j in 0..nk {
            let d_score = cross[[i, j]] * (grad_cross[[i, j]] - inner);
            for k in 0..d {
                let diff = features[[i, k]] - vertices[[j, k]];
                d_features[[i, k]] -= d_score * diff;
                d_vertices[[j, k]] += d_score * diff;
            }
        }
    }
    (d_features, d_vertices)
}

/// Block graph `[[A^S, A^C], [A^C^T, A^K]]` over stacked vertices `[V^S; V^K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGraph {
    pub adjacency: Matrix,
    pub vertices: Matrix,
    batch_size: usize,
}

impl JointGraph {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_knowledge(&self) -> usize {
        self.adjacency.nrows() - self.batch_size
    }

    pub fn similarity_block(&self) -> ArrayView2<'_, f64> {
        self.adjacency.slice(s![..self.batch_size, ..self.batch_size])
    }

    pub fn cross_block(&self) -> ArrayView2<'_, f64> {
        self.adjacency.slice(s![..self.batch_size, self.batch_size..])
    }

    pub fn knowledge_block(&self) -> ArrayView2<'_, f64> {
        self.adjacency.slice(s![self.batch_size.., self.batch_size..])
    }
}

pub fn assemble_joint(
    isg: &SimilarityGraph,
    akg_adj: ArrayView2<f64>,
    cross: ArrayView2<f64>,
    vertices: ArrayView2<f64>,
) -> Result<JointGraph> {
    let nb = isg.adjacency.nrows();
    let nk = akg_adj.nrows();
    let shapes_ok = isg.adjacency.ncols() == nb
        && isg.vertices.nrows() == nb
        && akg_adj.ncols() == nk
        && cross.dim() == (nb, nk)
        && vertices.nrows() == nk
        && vertices.ncols() == isg.vertices.ncols();
    if !shapes_ok {
        return Err(Error::Argument(format!(
            "inconsistent joint graph shapes: A^S {:?}, A^K {:?}, A^C {:?}, V^S {:?}, V^K {:?}",
            isg.adjacency.shape(),
            akg_adj.shape(),
            cross.shape(),
            isg.vertices.shape(),
            vertices.shape()
        )));
    }
    let top = concatenate![Axis(1), isg.adjacency, cross];
    let bottom = concatenate![Axis(1), cross.t(), akg_adj];
    Ok(JointGraph {
        adjacency: concatenate![Axis(0), top, bottom],
        vertices: concatenate![Axis(0), isg.vertices, vertices],
        batch_size: nb,
    })
}

/// One GCN layer `ReLU(A^J (V^J W^J))`.
pub fn propagate(joint: &JointGraph, gcn_weight: ArrayView2<f64>) -> Result<Matrix> {
    Ok(propagate_parts(joint, gcn_weight)?.2)
}

fn propagate_parts(joint: &JointGraph, gcn_weight: ArrayView2<f64>) -> Result<(Matrix, Matrix, Matrix)> {
    let d = joint.vertices.ncols();
    if gcn_weight.dim() != (d, d) {
        return Err(Error::Config(format!(
            "GCN weight must be {d}x{d}, got {:?}",
            gcn_weight.shape()
        )));
    }
    let transformed = joint.vertices.dot(&gcn_weight);
    let pre = joint.adjacency.dot(&transformed);
    ensure_finite(pre.view(), "propagated vertices")?;
    let out = pre.mapv(|v| v.max(0.0));
    Ok((transformed, pre, out))
}

/// Propagated batch features `V̄^S` and the aggregate `F = (V^S + V̄^S) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedBatch {
    pub propagated: Matrix,
    pub aggregated: Matrix,
}

pub fn enhance(features: ArrayView2<f64>, propagated: ArrayView2<f64>) -> Result<EnhancedBatch> {
    if features.dim() != propagated.dim() {
        return Err(Error::Argument(format!(
            "cannot aggregate {:?} with {:?}",
            features.shape(),
            propagated.shape()
        )));
    }
    let aggregated = (&features + &propagated) * 0.5;
    Ok(EnhancedBatch {
        propagated: propagated.to_owned(),
        aggregated,
    })
}

/// Persistent knowledge graph: vertices `V^K`, its edge parameters and the
/// GCN weight `W^J`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraphState {
    pub vertices: Matrix,
    pub edge: EdgeParams,
    pub gcn_weight: Matrix,
}

impl KnowledgeGraphState {
    pub fn num_vertices(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vertices.ncols()
    }

    /// Copy of `V^K` to serve as the stability reference for the next step.
    pub fn snapshot_vertices(&self) -> Matrix {
        self.vertices.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphMemoryConfig {
    pub num_vertices: usize,
    pub dim: usize,
    /// Std of `W^S`/`W^K` at initialization.
    pub edge_init_std: f64,
    /// Std of `W^J` at initialization.
    pub gcn_init_std: f64,
}

impl GraphMemoryConfig {
    pub fn new(num_vertices: usize, dim: usize) -> Self {
        Self {
            num_vertices,
            dim,
            edge_init_std: 0.01,
            gcn_init_std: 0.01,
        }
    }
}

/// All memory parameters `psi`: ISG edge weights plus the knowledge graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMemory {
    pub similarity_edge: EdgeParams,
    pub knowledge: KnowledgeGraphState,
}

/// Intermediates of one memory forward pass.
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub isg: SimilarityGraph,
    pub akg_adjacency: Matrix,
    pub cross: Matrix,
    pub joint: JointGraph,
    transformed: Matrix,
    pre_activation: Matrix,
    pub propagated_all: Matrix,
    pub enhanced: EnhancedBatch,
}

impl GraphForward {
    /// Cosine similarity between every `V^S_i` and every `V̄^S_j`.
    pub fn feature_cosine(&self) -> Matrix {
        cosine_matrix(self.isg.vertices.view(), self.enhanced.propagated.view())
    }
}

/// Gradients of a scalar objective with respect to the memory inputs and
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphGrads {
    /// Gradient with respect to the batch features; discarded in training
    /// because the features are detached from the backbone.
    pub features: Matrix,
    pub similarity_weight: Matrix,
    pub similarity_bias: Matrix,
    pub vertices: Matrix,
    pub knowledge_weight: Matrix,
    pub knowledge_bias: Matrix,
    pub gcn_weight: Matrix,
}

impl GraphGrads {
    pub fn zeros(memory: &GraphMemory, batch_size: usize) -> Self {
        let d = memory.knowledge.dim();
        Self {
            features: Array2::zeros((batch_size, d)),
            similarity_weight: Array2::zeros((1, d)),
            similarity_bias: Array2::zeros((1, 1)),
            vertices: Array2::zeros(memory.knowledge.vertices.raw_dim()),
            knowledge_weight: Array2::zeros((1, d)),
            knowledge_bias: Array2::zeros((1, 1)),
            gcn_weight: Array2::zeros((d, d)),
        }
    }

    /// Parameter gradients in [`GraphMemory::params_mut`] order.
    pub fn into_param_order(self) -> Vec<Matrix> {
        vec![
            self.similarity_weight,
            self.similarity_bias,
            self.vertices,
            self.knowledge_weight,
            self.knowledge_bias,
            self.gcn_weight,
        ]
    }
}

impl GraphMemory {
    pub fn new<R: Rng + ?Sized>(config: GraphMemoryConfig, rng: &mut R) -> Result<Self> {
        if config.num_vertices == 0 || config.dim == 0 {
            return Err(Error::Config(format!("graph memory sizes must be positive: {config:?}")));
        }
        let d = config.dim;
        let vertices = randn(config.num_vertices, d, 1.0 / (d as f64).sqrt(), rng);
        let similarity_edge = EdgeParams::new(d, config.edge_init_std, rng);
        let edge = EdgeParams::new(d, config.edge_init_std, rng);
        let gcn_weight = randn(d, d, config.gcn_init_std, rng);
        Ok(Self {
            similarity_edge,
            knowledge: KnowledgeGraphState {
                vertices,
                edge,
                gcn_weight,
            },
        })
    }

    pub fn forward(&self, features: ArrayView2<f64>) -> Result<GraphForward> {
        let isg = build_isg(features, &self.similarity_edge)?;
        let vertices = self.knowledge.vertices.view();
        let akg = akg_adjacency(vertices, &self.knowledge.edge)?;
        let cross = cross_weights(features, vertices)?;
        let joint = assemble_joint(&isg, akg.view(), cross.view(), vertices)?;
        let (transformed, pre_activation, propagated_all) =
            propagate_parts(&joint, self.knowledge.gcn_weight.view())?;
        let nb = features.nrows();
        let propagated = propagated_all.slice(s![..nb, ..]);
        let enhanced = enhance(features, propagated)?;
        Ok(GraphForward {
            isg,
            akg_adjacency: akg,
            cross,
            joint,
            transformed,
            pre_activation,
            propagated_all,
            enhanced,
        })
    }

    /// Backpropagates `d objective / d F` through the whole memory chain.
    pub fn backward(&self, fwd: &GraphForward, grad_aggregated: ArrayView2<f64>) -> GraphGrads {
        let nb = fwd.joint.batch_size();
        let total = fwd.joint.adjacency.nrows();
        let d = self.knowledge.dim();
        let vertices = self.knowledge.vertices.view();
        let features = fwd.isg.vertices.view();

        // F = (V^S + V̄^S) / 2
        let half = grad_aggregated.mapv(|g| 0.5 * g);
        let mut d_features = half.clone();

        // V^G = ReLU(P), only the top nb rows reach F.
        let mut d_pre = Array2::zeros((total, d));
        d_pre.slice_mut(s![..nb, ..]).assign(&half);
        ndarray::Zip::from(&mut d_pre)
            .and(&fwd.pre_activation)
            .for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });

        // P = A^J H, H = V^J W^J
        let d_adj = d_pre.dot(&fwd.transformed.t());
        let d_transformed = fwd.joint.adjacency.t().dot(&d_pre);
        let d_gcn = fwd.joint.vertices.t().dot(&d_transformed);
        let d_stacked = d_transformed.dot(&self.knowledge.gcn_weight.t());
        d_features += &d_stacked.slice(s![..nb, ..]);
        let mut d_vertices = d_stacked.slice(s![nb.., ..]).to_owned();

        // Split the block adjacency gradient.
        let d_sim = d_adj.slice(s![..nb, ..nb]);
        let d_cross = &d_adj.slice(s![..nb, nb..]) + &d_adj.slice(s![nb.., ..nb]).t();
        let d_know = d_adj.slice(s![nb.., nb..]);

        let (dv_s, dw_s, db_s) = l1_adjacency_backward(features, &self.similarity_edge, &fwd.isg.adjacency, d_sim);
        d_features += &dv_s;
        let (dv_k, dw_k, db_k) =
            l1_adjacency_backward(vertices, &self.knowledge.edge, &fwd.akg_adjacency, d_know);
        d_vertices += &dv_k;
        let (dv_c, dk_c) = cross_weights_backward(features, vertices, &fwd.cross, d_cross.view());
        d_features += &dv_c;
        d_vertices += &dk_c;

        GraphGrads {
            features: d_features,
            similarity_weight: dw_s,
            similarity_bias: db_s,
            vertices: d_vertices,
            knowledge_weight: dw_k,
            knowledge_bias: db_k,
            gcn_weight: d_gcn,
        }
    }

    /// Enhanced representation `F` for an arbitrary set of embeddings,
    /// processed in consecutive chunks of `chunk` rows.
    pub fn enhance_in_chunks(&self, features: ArrayView2<f64>, chunk: usize) -> Result<Matrix> {
        let chunk = chunk.max(2);
        let n = features.nrows();
        let mut out = Array2::zeros(features.raw_dim());
        let mut start = 0;
        while start < n {
            let mut end = (start + chunk).min(n);
            // A trailing single row cannot form a graph; fold it into this chunk.
            if n - end == 1 {
                end = n;
            }
            let fwd = self.forward(features.slice(s![start..end, ..]))?;
            out.slice_mut(s![start..end, ..]).assign(&fwd.enhanced.aggregated);
            start = end;
        }
        Ok(out)
    }
}

impl Parameterized for GraphMemory {
    fn named_params(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("graph.similarity.weight".into(), &self.similarity_edge.weight),
            ("graph.similarity.bias".into(), &self.similarity_edge.bias),
            ("graph.knowledge.vertices".into(), &self.knowledge.vertices),
            ("graph.knowledge.weight".into(), &self.knowledge.edge.weight),
            ("graph.knowledge.bias".into(), &self.knowledge.edge.bias),
            ("graph.gcn.weight".into(), &self.knowledge.gcn_weight),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.similarity_edge.weight,
            &mut self.similarity_edge.bias,
            &mut self.knowledge.vertices,
            &mut self.knowledge.edge.weight,
            &mut self.knowledge.edge.bias,
            &mut self.knowledge.gcn_weight,
        ]
    }
}
