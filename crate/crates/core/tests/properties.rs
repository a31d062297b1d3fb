mod common;

use lreid_core::backbone::Classifier;
use lreid_core::evaluation::{score_task, RetrievalTask};
use lreid_core::graph_memory::{cross_weights, GraphMemory};
use lreid_core::losses::{mine_triplets, plasticity_loss, TripletIndex};
use lreid_core::tensor::{randn, softmax_rows, Matrix};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    randn(rows, cols, scale, &mut common::rng(seed))
}

fn assert_symmetric(m: &Matrix) {
    assert_eq!(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            assert_eq!(m[[i, j]], m[[j, i]], "({i},{j})");
        }
    }
}

fn orthogonal(n: usize, seed: u64) -> Matrix {
    // Gram-Schmidt on a Gaussian matrix.
    let g = matrix(n, n, seed, 1.0);
    let mut q = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut v = g.column(j).to_owned();
        for k in 0..j {
            let qk = q.column(k);
            v = &v - &(&qk * qk.dot(&v));
        }
        let norm = v.dot(&v).sqrt();
        q.column_mut(j).assign(&(v / norm));
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_weights_rows_sum_to_one(nb in 2usize..10, nk in 1usize..8, d in 1usize..9, seed in any::<u64>(), scale in 0.1f64..20.0) {
        let f = matrix(nb, d, seed, scale);
        let v = matrix(nk, d, seed ^ 1, scale);
        let a = cross_weights(f.view(), v.view()).unwrap();
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn adjacencies_are_symmetric(nb in 2usize..9, seed in any::<u64>()) {
        let mut memory = common::toy_memory(seed);
        memory.knowledge.vertices = matrix(common::TOY_VERTICES, common::TOY_DIM, seed ^ 7, 2.0);
        let f = matrix(nb, common::TOY_DIM, seed ^ 3, 1.5);
        let fwd = memory.forward(f.view()).unwrap();
        assert_symmetric(&fwd.isg.adjacency);
        assert_symmetric(&fwd.akg_adjacency);
        assert_symmetric(&fwd.joint.adjacency);
        prop_assert_eq!(fwd.joint.cross_block().to_owned(), fwd.cross.clone());
    }

    #[test]
    fn softmax_is_shift_invariant(rows in 1usize..5, cols in 1usize..8, seed in any::<u64>(), shift in -50f64..50.0) {
        let x = matrix(rows, cols, seed, 3.0);
        let a = softmax_rows(x.view());
        let b = softmax_rows((&x + shift).view());
        for (p, q) in a.iter().zip(b.iter()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn plasticity_is_permutation_invariant(ids in 2usize..5, per in 2usize..4, d in 1usize..6, seed in any::<u64>()) {
        let n = ids * per;
        let f = matrix(n, d, seed, 1.0);
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let base = plasticity_loss(f.view(), &mine_triplets(f.view(), &labels)).value;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut common::rng(seed ^ 11));
        let pf = f.select(Axis(0), &perm);
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = plasticity_loss(pf.view(), &mine_triplets(pf.view(), &pl)).value;
        prop_assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_invariant_to_rotation_and_gallery_order(nq in 1usize..6, ng in 2usize..16, d in 2usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let q = randn(nq, d, 1.0, &mut r);
        let g = randn(ng, d, 1.0, &mut r);
        let ql: Vec<usize> = (0..nq).map(|i| i % 3).collect();
        let gl: Vec<usize> = (0..ng).map(|i| i % 3).collect();
        let task = |q: &Matrix, g: &Matrix, gl: &[usize]| score_task(&RetrievalTask {
            query: q.view(), query_labels: &ql, query_cameras: None,
            gallery: g.view(), gallery_labels: gl, gallery_cameras: None,
        });
        let base = task(&q, &g, &gl);
        let rot = orthogonal(d, seed ^ 5);
        let rotated = task(&q.dot(&rot), &g.dot(&rot), &gl);
        let mut perm: Vec<usize> = (0..ng).collect();
        perm.shuffle(&mut r);
        let pg = g.select(Axis(0), &perm);
        let pl: Vec<usize> = perm.iter().map(|&i| gl[i]).collect();
        let permuted = task(&q, &pg, &pl);
        match (base, rotated, permuted) {
            (Ok(a), Ok(b), Ok(c)) => {
                prop_assert!((a.map - b.map).abs() < 1e-9 && a.rank1 == b.rank1);
                prop_assert!((a.map - c.map).abs() < 1e-12 && a.rank1 == c.rank1);
            }
            (a, b, c) => prop_assert!(a.is_err() && b.is_err() && c.is_err()),
        }
    }

    #[test]
    fn classifier_growth_preserves_old_logits(d in 1usize..8, old in 1usize..6, extra in 1usize..6, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let mut c = Classifier::empty(d);
        c.grow(old, &mut r).unwrap();
        let c = Classifier::from_parts(randn(d, old, 1.0, &mut r), randn(1, old, 1.0, &mut r)).unwrap();
        let f = randn(4, d, 1.0, &mut r);
        let before = c.classify(f.view()).unwrap();
        let mut grown = c.clone();
        grown.grow(extra, &mut r).unwrap();
        let after = grown.classify(f.view()).unwrap();
        prop_assert_eq!(after.ncols(), old + extra);
        prop_assert_eq!(Classifier::old_columns(&after, old).to_owned(), before);
    }
}

#[test]
fn degenerate_triplets_floor_at_ln2() {
    // Square vertices: both neighbours of each corner are equidistant.
    let f: Matrix = ndarray::array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    let triplets: Vec<TripletIndex> = (0..4)
        .map(|a| TripletIndex { anchor: a, positive: (a + 1) % 4, negative: (a + 3) % 4 })
        .filter(|t| {
            let d = |i: usize, j: usize| (&f.row(i) - &f.row(j)).mapv(|x| x * x).sum();
            d(t.anchor, t.positive) == d(t.anchor, t.negative)
        })
        .collect();
    assert_eq!(triplets.len(), 4);
    let v = plasticity_loss(f.view(), &triplets).value;
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn stability_floor_at_ln2() {
    let memory: GraphMemory = common::toy_memory(3);
    let v = memory.knowledge.snapshot_vertices();
    let s = lreid_core::losses::stability_loss(memory.knowledge.vertices.view(), v.view()).unwrap();
    assert!((s.value - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(s.grad.iter().all(|&g| g == 0.0));
}
