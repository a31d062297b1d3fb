#![allow(dead_code)]

use lreid_core::backbone::{Backbone, BackboneConfig, Classifier, Parameterized};
use lreid_core::graph_memory::{GraphMemory, GraphMemoryConfig};
use lreid_core::losses::{self, TripletIndex};
use lreid_core::tensor::{randn, Matrix};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences of `f` around `x`.
pub fn numeric_grad(x: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + FD_STEP;
        let up = f(&probe);
        probe[idx] = orig - FD_STEP;
        let down = f(&probe);
        probe[idx] = orig;
        g[idx] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, and 0 when both vanish.
pub fn rel_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub const TOY_BATCH: usize = 6;
pub const TOY_VERTICES: usize = 4;
pub const TOY_DIM: usize = 5;
pub const TOY_LABELS: [usize; TOY_BATCH] = [0, 0, 1, 1, 2, 2];

/// Memory with parameters large enough that every path carries signal.
pub fn toy_memory(seed: u64) -> GraphMemory {
    let config = GraphMemoryConfig {
        num_vertices: TOY_VERTICES,
        dim: TOY_DIM,
        edge_init_std: 0.5,
        gcn_init_std: 0.5,
    };
    let mut r = rng(seed);
    let mut m = GraphMemory::new(config, &mut r).unwrap();
    m.knowledge.vertices = randn(TOY_VERTICES, TOY_DIM, 1.0, &mut r);
    m.similarity_edge.bias[[0, 0]] = 0.3;
    m.knowledge.edge.bias[[0, 0]] = -0.2;
    m
}

/// Analytic-versus-numeric relative error for every differentiable piece
/// on the toy instance.
pub fn gradient_checks() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    let mut r = rng(17);

    let logits = randn(TOY_BATCH, 7, 1.0, &mut r);
    let ce = losses::cross_entropy(logits.view(), &TOY_LABELS).unwrap();
    let num = numeric_grad(&logits, |x| losses::cross_entropy(x.view(), &TOY_LABELS).unwrap().value);
    out.push(("L_c / logits".into(), rel_error(&ce.grad, &num)));

    let old = randn(TOY_BATCH, 7, 1.0, &mut r);
    let kd = losses::distillation(logits.view(), old.view(), 4).unwrap();
    let num = numeric_grad(&logits, |x| losses::distillation(x.view(), old.view(), 4).unwrap().value);
    out.push(("L_d / new logits".into(), rel_error(&kd.grad, &num)));

    let features = randn(TOY_BATCH, TOY_DIM, 1.0, &mut r);
    let triplets = losses::mine_triplets(features.view(), &TOY_LABELS);
    let lp = losses::plasticity_loss(features.view(), &triplets);
    let num = numeric_grad(&features, |x| losses::plasticity_loss(x.view(), &triplets).value);
    out.push(("L_p / F".into(), rel_error(&lp.grad, &num)));

    let vertices = randn(TOY_VERTICES, TOY_DIM, 1.0, &mut r);
    let reference = randn(TOY_VERTICES, TOY_DIM, 1.0, &mut r);
    let ls = losses::stability_loss(vertices.view(), reference.view()).unwrap();
    let num = numeric_grad(&vertices, |x| losses::stability_loss(x.view(), reference.view()).unwrap().value);
    out.push(("L_s / V^K".into(), rel_error(&ls.grad, &num)));

    let old_features = randn(TOY_BATCH, TOY_DIM, 1.0, &mut r);
    let spd = losses::similarity_preserving(features.view(), old_features.view()).unwrap();
    let num = numeric_grad(&features, |x| losses::similarity_preserving(x.view(), old_features.view()).unwrap().value);
    out.push(("L_spd / features".into(), rel_error(&spd.grad, &num)));

    out.extend(graph_chain_checks());
    out.extend(backbone_chain_checks());
    out
}

/// `J = L_p(F) + Σ R ⊙ F` through ISG → joint graph → GCN → F, with the
/// triplets mined once at the base point.
pub fn graph_chain_checks() -> Vec<(String, f64)> {
    let memory = toy_memory(5);
    let mut r = rng(23);
    let features = randn(TOY_BATCH, TOY_DIM, 1.0, &mut r);
    let projection = randn(TOY_BATCH, TOY_DIM, 1.0, &mut r);
    let base = memory.forward(features.view()).unwrap();
    let triplets: Vec<TripletIndex> = losses::mine_triplets(base.enhanced.aggregated.view(), &TOY_LABELS);

    let objective = |m: &GraphMemory, x: &Matrix| {
        let f = m.forward(x.view()).unwrap().enhanced.aggregated;
        losses::plasticity_loss(f.view(), &triplets).value + (&f * &projection).sum()
    };
    let d_f = losses::plasticity_loss(base.enhanced.aggregated.view(), &triplets).grad + &projection;
    let grads = memory.backward(&base, d_f.view());

    let mut out = Vec::new();
    let num = numeric_grad(&features, |x| objective(&memory, x));
    out.push(("chain / V^S".into(), rel_error(&grads.features, &num)));

    let names: Vec<String> = memory.named_params().into_iter().map(|(n, _)| n).collect();
    let analytic = grads.into_param_order();
    for (i, name) in names.iter().enumerate() {
        let start = memory.named_params()[i].1.clone();
        let num = numeric_grad(&start, |p| {
            let mut m = memory.clone();
            *m.params_mut().remove(i) = p.clone();
            objective(&m, &features)
        });
        out.push((format!("chain / {name}"), rel_error(&analytic[i], &num)));
    }
    out
}

/// Cross-entropy through the classifier and the MLP backbone.
pub fn backbone_chain_checks() -> Vec<(String, f64)> {
    let mut r = rng(31);
    let config = BackboneConfig {
        input_dim: 4,
        hidden: vec![7, 6],
        embedding_dim: TOY_DIM,
    };
    let backbone = Backbone::new(config, &mut r).unwrap();
    let mut classifier = Classifier::empty(TOY_DIM);
    classifier.grow(3, &mut r).unwrap();
    let w = randn(TOY_DIM, 3, 1.0, &mut r);
    classifier = Classifier::from_parts(w, classifier.bias().clone()).unwrap();
    let inputs = randn(TOY_BATCH, 4, 1.0, &mut r);

    let objective = |b: &Backbone, c: &Classifier| {
        let f = b.extract_features(inputs.view()).unwrap();
        let logits = c.classify(f.view()).unwrap();
        losses::cross_entropy(logits.view(), &TOY_LABELS).unwrap().value
    };
    let (features, cache) = backbone.forward_train(inputs.view()).unwrap();
    let logits = classifier.classify(features.view()).unwrap();
    let ce = losses::cross_entropy(logits.view(), &TOY_LABELS).unwrap();
    let (cls_grads, d_features) = classifier.backward(features.view(), ce.grad.view());
    let bb_grads = backbone.backward(&cache, d_features.view());

    let mut out = Vec::new();
    for (i, (name, start)) in backbone.named_params().into_iter().enumerate() {
        let num = numeric_grad(start, |p| {
            let mut b = backbone.clone();
            *b.params_mut().remove(i) = p.clone();
            objective(&b, &classifier)
        });
        out.push((format!("L_c / {name}"), rel_error(&bb_grads[i], &num)));
    }
    for (i, (name, start)) in classifier.named_params().into_iter().enumerate() {
        let num = numeric_grad(start, |p| {
            let mut c = classifier.clone();
            *c.params_mut().remove(i) = p.clone();
            objective(&backbone, &c)
        });
        out.push((format!("L_c / {name}"), rel_error(&cls_grads[i], &num)));
    }
    out
}

/// Scores of one query computed without sorting: an item's rank counts the
/// valid items strictly closer, plus equally close items at lower index.
pub struct OracleScores {
    pub map: f64,
    pub rank1: f64,
    pub valid: usize,
    pub dropped: usize,
}

pub fn brute_force_scores(
    query: &Matrix,
    query_labels: &[usize],
    query_cameras: Option<&[usize]>,
    gallery: &Matrix,
    gallery_labels: &[usize],
    gallery_cameras: Option<&[usize]>,
) -> Option<OracleScores> {
    let mut aps = Vec::new();
    let mut hits = 0usize;
    let mut dropped = 0usize;
    for q in 0..query.nrows() {
        let keep: Vec<usize> = (0..gallery.nrows())
            .filter(|&g| match (query_cameras, gallery_cameras) {
                (Some(qc), Some(gc)) => !(gallery_labels[g] == query_labels[q] && gc[g] == qc[q]),
                _ => true,
            })
            .collect();
        let dist = |g: usize| -> f64 {
            let mut s = 0.0;
            for k in 0..query.ncols() {
                let diff = query[[q, k]] - gallery[[g, k]];
                s += diff * diff;
            }
            s
        };
        let rank_of = |g: usize| -> usize {
            let dg = dist(g);
            1 + keep.iter().filter(|&&o| dist(o) < dg || (dist(o) == dg && o < g)).count()
        };
        let mut positive_ranks: Vec<usize> =
            keep.iter().filter(|&&g| gallery_labels[g] == query_labels[q]).map(|&g| rank_of(g)).collect();
        if positive_ranks.is_empty() {
            dropped += 1;
            continue;
        }
        positive_ranks.sort_unstable();
        let mut sum = 0.0;
        for (k, &rank) in positive_ranks.iter().enumerate() {
            sum += (k + 1) as f64 / rank as f64;
        }
        aps.push(sum / positive_ranks.len() as f64);
        if positive_ranks[0] == 1 {
            hits += 1;
        }
    }
    if aps.is_empty() {
        return None;
    }
    let n = aps.len() as f64;
    Some(OracleScores {
        map: aps.iter().sum::<f64>() / n,
        rank1: hits as f64 / n,
        valid: aps.len(),
        dropped,
    })
}
