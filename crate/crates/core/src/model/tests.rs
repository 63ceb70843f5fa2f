use std::sync::Arc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{attention_layer, readout};
use super::*;
use crate::autodiff::{Index, Tape};
use crate::geometry::{BallConfig, PoincarePoint};
use crate::graph::{build_global_graph, UserSequence};

fn ball(d: usize) -> BallConfig {
    BallConfig::new(1.0, d).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let b = ball(d);
    let mut out = Array2::zeros((n, d));
    for r in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let p = b.exp0(&b.tangent(v).unwrap()).unwrap();
        out.row_mut(r).assign(&ndarray::ArrayView1::from(p.coords()));
    }
    out
}

fn point(a: &Array2<f64>, r: usize) -> PoincarePoint {
    ball(a.ncols()).point(a.row(r).to_vec()).unwrap()
}

fn assert_rows_close(got: &Array2<f64>, want: &[Vec<f64>], tol: f64) {
    for (r, w) in want.iter().enumerate() {
        for (a, b) in got.row(r).iter().zip(w) {
            assert!((a - b).abs() < tol, "row {r}: {a} vs {b}");
        }
    }
}

/// Tangent-space aggregation at `x` with the given weights, via the
/// reference geometry.
fn oracle_update(x: &PoincarePoint, nbrs: &[PoincarePoint], e: &[f64]) -> Vec<f64> {
    let b = ball(x.dim());
    let mut acc = vec![0.0; x.dim()];
    for (n, w) in nbrs.iter().zip(e) {
        let l = b.log_map(x, n).unwrap();
        for (a, v) in acc.iter_mut().zip(l.coords()) {
            *a += w * v;
        }
    }
    b.exp_map(x, &b.tangent(acc).unwrap()).unwrap().into_coords()
}

fn run_layer(h: &Array2<f64>, dst: &[usize], src: &[usize], w: &Array2<f64>, bias: f64) -> Array2<f64> {
    let cfg = ModelConfig::new(h.ncols(), 1);
    let sp = Space::new(&cfg);
    let tape = Tape::new();
    let hv = tape.constant_array(h.clone());
    let wv = tape.constant_array(w.clone());
    let bv = tape.scalar(bias);
    let dst: Index = Arc::from(dst.to_vec());
    let src: Index = Arc::from(src.to_vec());
    let out = attention_layer(&sp, hv, &dst, &src, None, wv, bv, h.nrows()).unwrap();
    (*out.array()).clone()
}

#[test]
fn single_neighbour_moves_onto_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = random_points(&mut rng, 2, 4);
    let w = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
    let out = run_layer(&h, &[0], &[1], &w, 0.3);
    assert_rows_close(&out, &[h.row(1).to_vec(), h.row(1).to_vec()], 1e-9);
}

#[test]
fn isolated_node_is_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = random_points(&mut rng, 3, 4);
    let w = Array2::zeros((8, 1));
    let out = run_layer(&h, &[0], &[1], &w, 0.0);
    assert_eq!(out.row(2), h.row(2));
    let out = run_layer(&h, &[], &[], &w, 0.0);
    assert_eq!(out, h);
}

#[test]
fn two_neighbours_equal_logits_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = random_points(&mut rng, 3, 4);
    let out = run_layer(&h, &[0, 0], &[1, 2], &Array2::zeros((8, 1)), 0.7);
    let want = oracle_update(&point(&h, 0), &[point(&h, 1), point(&h, 2)], &[0.5, 0.5]);
    assert_rows_close(&out, &[want], 1e-12);
}

#[test]
fn random_layer_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 3;
    let h = random_points(&mut rng, 4, d);
    let w = Array2::from_shape_fn((2 * d, 1), |_| rng.random_range(-1.0..1.0));
    let bias = 0.2;
    // node 0 <- {1, 2, 3}, node 3 <- {0}
    let out = run_layer(&h, &[0, 0, 0, 3], &[1, 2, 3, 0], &w, bias);
    let b = ball(d);
    let logit = |i: usize, j: usize| {
        let li = b.log0(&point(&h, i));
        let lj = b.log0(&point(&h, j));
        let cat: Vec<f64> = li.coords().iter().chain(lj.coords()).copied().collect();
        cat.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>() + bias
    };
    let l: Vec<f64> = [1, 2, 3].iter().map(|&j| logit(0, j)).collect();
    let z: f64 = l.iter().map(|x| x.exp()).sum();
    let e: Vec<f64> = l.iter().map(|x| x.exp() / z).collect();
    let want0 = oracle_update(&point(&h, 0), &[point(&h, 1), point(&h, 2), point(&h, 3)], &e);
    assert_rows_close(&out, &[want0], 1e-12);
    assert_rows_close(&out.slice(s![3.., ..]).to_owned(), &[h.row(0).to_vec()], 1e-9);
}

#[test]
fn readout_identities_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sp = Space::new(&ModelConfig::new(3, 2));
    let a = random_points(&mut rng, 2, 3);
    let c = random_points(&mut rng, 2, 3);
    let tape = Tape::new();
    let (va, vc) = (tape.constant_array(a.clone()), tape.constant_array(c.clone()));
    let out = readout(&sp, &[va, vc], &[1.0, 0.0]).unwrap();
    assert_rows_close(&out.array(), &[a.row(0).to_vec(), a.row(1).to_vec()], 1e-12);
    let out = readout(&sp, &[va, va, va], &[0.2, 0.3, 0.5]).unwrap();
    assert_rows_close(&out.array(), &[a.row(0).to_vec(), a.row(1).to_vec()], 1e-12);
    let out = readout(&sp, &[va, vc], &[0.4, 0.6]).unwrap();
    let b = ball(3);
    let want: Vec<Vec<f64>> = (0..2)
        .map(|r| {
            let la = b.log0(&point(&a, r));
            let lc = b.log0(&point(&c, r));
            let mix: Vec<f64> = la.coords().iter().zip(lc.coords()).map(|(x, y)| 0.4 * x + 0.6 * y).collect();
            b.exp0(&b.tangent(mix).unwrap()).unwrap().into_coords()
        })
        .collect();
    assert_rows_close(&out.array(), &want, 1e-12);
}

struct Fixture {
    params: ModelParams,
    global: GlobalIndex,
}

fn fixture(cfg: ModelConfig, seed: u64) -> Fixture {
    let seqs = vec![
        UserSequence::new(0, vec![0, 1, 2, 1]),
        UserSequence::new(1, vec![2, 3, 4]),
        UserSequence::new(2, vec![4, 0, 0, 3]),
    ];
    let graph = build_global_graph(&seqs, 3, 5).unwrap();
    let params = ModelParams::init(3, 5, &cfg, seed).unwrap();
    let global = GlobalIndex::new(&graph, &params).unwrap();
    Fixture { params, global }
}

fn stripped(mut cfg: ModelConfig) -> ModelConfig {
    cfg.ablation = Ablation {
        no_global: true,
        no_local: true,
        no_long: true,
        no_short: true,
    };
    cfg
}

fn set(p: &mut ModelParams, name: &str, f: impl Fn(usize, usize) -> f64) {
    let b = p.block_mut(name).unwrap();
    let (r, c) = b.dim();
    *b = Array2::from_shape_fn((r, c), |(i, j)| f(i, j));
}

fn readout_selecting(p: &mut ModelParams, slot: usize) {
    let d = p.config().dim;
    set(p, "readout.w", |i, j| if j == slot * d + i { 1.0 } else { 0.0 });
}

fn item_point(p: &ModelParams, i: usize) -> PoincarePoint {
    let b = ball(p.config().dim);
    let pre = p.block("item_embeddings").unwrap().row(i).to_vec();
    b.exp0(&b.tangent(pre).unwrap()).unwrap()
}

#[test]
fn probabilities_sum_to_one() {
    for seed in 0..10 {
        let f = fixture(ModelConfig::new(4, 2), seed);
        let out = forward(&f.params, &f.global, &[0, 2, 2, 4]).unwrap();
        let s: f64 = out.probabilities.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert_eq!(out.scores.len(), 5);
        for row in out.long_attention.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}

#[test]
fn readout_pass_through_returns_last_item() {
    let mut cfg = stripped(ModelConfig::new(4, 1));
    cfg.ablation.no_long = false;
    cfg.ablation.no_short = false;
    let mut f = fixture(cfg, 3);
    readout_selecting(&mut f.params, 0);
    let out = forward(&f.params, &f.global, &[1, 3, 2]).unwrap();
    let want = item_point(&f.params, 2);
    for (a, b) in out.user_point.iter().zip(want.coords()) {
        assert!((a - b).abs() < 1e-12);
    }
    // With the user at the last item, scores are the geodesic inner product.
    let b = ball(4);
    let u = b.point(out.user_point.clone()).unwrap();
    for i in 0..5 {
        let d = b.poincare_inner(&u, &item_point(&f.params, i)).unwrap();
        assert!((out.scores[i] - d).abs() < 1e-10);
    }
}

#[test]
fn zero_readout_puts_user_at_origin() {
    let mut f = fixture(ModelConfig::new(4, 1), 4);
    set(&mut f.params, "readout.w", |_, _| 0.0);
    let out = forward(&f.params, &f.global, &[1, 3, 2]).unwrap();
    assert!(out.user_point.iter().all(|&x| x == 0.0));
    // D(0, v) = ½(0 + d²(0,v) − d²(0,v)) = 0, so every item ties.
    for i in 0..5 {
        assert!(out.scores[i].abs() < 1e-12);
        assert!((out.probabilities[i] - 0.2).abs() < 1e-12);
    }
}

#[test]
fn uniform_long_attention_averages_log_maps() {
    let mut cfg = stripped(ModelConfig::new(3, 1));
    cfg.ablation.no_long = false;
    let mut f = fixture(cfg, 5);
    set(&mut f.params, "attention.w_query", |_, _| 0.0);
    set(&mut f.params, "attention.w_key", |_, _| 0.0);
    set(&mut f.params, "attention.w_value", |i, j| (i == j) as u8 as f64);
    readout_selecting(&mut f.params, 1);
    let seq = [4, 1, 1];
    let out = forward(&f.params, &f.global, &seq).unwrap();
    assert!(out.long_attention.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    let b = ball(3);
    let mut mean = [0.0; 3];
    for &i in &seq {
        for (m, v) in mean.iter_mut().zip(b.log0(&item_point(&f.params, i)).coords()) {
            *m += v / 3.0;
        }
    }
    let want = b.exp0(&b.tangent(mean.to_vec()).unwrap()).unwrap();
    for (a, w) in out.user_point.iter().zip(want.coords()) {
        assert!((a - w).abs() < 1e-12);
    }
}

#[test]
fn long_attention_single_item() {
    let mut cfg = stripped(ModelConfig::new(3, 1));
    cfg.ablation.no_long = false;
    let mut f = fixture(cfg, 6);
    readout_selecting(&mut f.params, 1);
    let out = forward(&f.params, &f.global, &[2]).unwrap();
    assert_eq!(out.long_attention.dim(), (1, 1));
    let b = ball(3);
    let wv = f.params.block("attention.w_value").unwrap();
    let t = b.log0(&item_point(&f.params, 2));
    let z = b.exp0(&b.tangent(wv.dot(&ndarray::arr1(t.coords())).to_vec()).unwrap()).unwrap();
    for (a, w) in out.user_point.iter().zip(z.coords()) {
        assert!((a - w).abs() < 1e-12);
    }
}

#[test]
fn dense_long_attention_matches_matrix_evaluation() {
    let mut cfg = stripped(ModelConfig::new(3, 1));
    cfg.ablation.no_long = false;
    let mut f = fixture(cfg, 7);
    readout_selecting(&mut f.params, 1);
    let seq = [0, 3, 1];
    let out = forward(&f.params, &f.global, &seq).unwrap();
    let b = ball(3);
    let x = Array2::from_shape_fn((3, 3), |(r, c)| b.log0(&item_point(&f.params, seq[r])).coords()[c]);
    let p = |n: &str| f.params.block(n).unwrap().clone();
    let (q, k, v) = (x.dot(&p("attention.w_query").t()), x.dot(&p("attention.w_key").t()), x.dot(&p("attention.w_value").t()));
    let mut a = q.dot(&k.t()) / 3f64.sqrt();
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |x, &y| x.max(y));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|z| z / s);
    }
    for (g, w) in out.long_attention.iter().zip(a.iter()) {
        assert!((g - w).abs() < 1e-12);
    }
    let mean = a.dot(&v).mean_axis(ndarray::Axis(0)).unwrap();
    let z = b.exp0(&b.tangent(mean.to_vec()).unwrap()).unwrap();
    for (g, w) in out.user_point.iter().zip(z.coords()) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn short_attention_closed_forms() {
    let mut cfg = stripped(ModelConfig::new(3, 1));
    cfg.ablation.no_short = false;
    let mut f = fixture(cfg.clone(), 8);
    readout_selecting(&mut f.params, 2);
    set(&mut f.params, "attention.q", |_, _| 0.0);
    let out = forward(&f.params, &f.global, &[0, 1, 2, 3]).unwrap();
    assert!(out.short_attention.iter().all(|&g| g == 0.0));
    assert!(out.user_point.iter().all(|&x| x == 0.0));

    let mut f = fixture(cfg, 9);
    readout_selecting(&mut f.params, 2);
    set(&mut f.params, "attention.w_last", |_, _| 0.0);
    set(&mut f.params, "attention.w_item", |_, _| 0.0);
    let out = forward(&f.params, &f.global, &[4]).unwrap();
    let q = f.params.block("attention.q").unwrap();
    let g1 = 0.5 * q.sum();
    assert!((out.short_attention[0] - g1).abs() < 1e-15);
    let b = ball(3);
    let t: Vec<f64> = b.log0(&item_point(&f.params, 4)).coords().iter().map(|x| g1 * x).collect();
    let z = b.exp0(&b.tangent(t).unwrap()).unwrap();
    for (g, w) in out.user_point.iter().zip(z.coords()) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn short_attention_matches_hand_evaluation() {
    let mut cfg = stripped(ModelConfig::new(3, 1));
    cfg.ablation.no_short = false;
    let mut f = fixture(cfg, 10);
    readout_selecting(&mut f.params, 2);
    let seq = [3, 0, 4, 1];
    let out = forward(&f.params, &f.global, &seq).unwrap();
    let b = ball(3);
    let p = |n: &str| f.params.block(n).unwrap().clone();
    let t: Vec<ndarray::Array1<f64>> = seq
        .iter()
        .map(|&i| ndarray::arr1(b.log0(&item_point(&f.params, i)).coords()))
        .collect();
    let q = p("attention.q").column(0).to_owned();
    let mut sum = ndarray::Array1::<f64>::zeros(3);
    for (i, ti) in t.iter().enumerate() {
        let pre = p("attention.w_last").dot(&t[3]) + p("attention.w_item").dot(ti);
        let gamma = q.dot(&pre.mapv(|x| 1.0 / (1.0 + (-x).exp())));
        assert!((out.short_attention[i] - gamma).abs() < 1e-12);
        sum = sum + ti * gamma;
    }
    let z = b.exp0(&b.tangent(sum.to_vec()).unwrap()).unwrap();
    for (g, w) in out.user_point.iter().zip(z.coords()) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn euclidean_toy_is_hand_computable() {
    let mut cfg = stripped(ModelConfig::new(2, 1));
    cfg.variant = Variant::Euclidean;
    let mut f = fixture(cfg, 11);
    readout_selecting(&mut f.params, 0);
    set(&mut f.params, "item_embeddings", |i, j| [[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [-1.0, 0.0], [0.5, 0.5], [0.0, 0.0]][i][j]);
    let out = forward(&f.params, &f.global, &[0, 2]).unwrap();
    // user = (1,1); scores = item·user
    let want = [1.0, 2.0, 2.0, -1.0, 1.0];
    assert_eq!(out.scores, want);
    let z: f64 = want.iter().map(|x: &f64| x.exp()).sum();
    for (p, s) in out.probabilities.iter().zip(want) {
        assert!((p - s.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn identical_items_get_identical_probabilities() {
    let mut f = fixture(ModelConfig::new(4, 1), 12);
    let row = f.params.block("item_embeddings").unwrap().row(1).to_owned();
    f.params.block_mut("item_embeddings").unwrap().row_mut(3).assign(&row);
    let out = forward(&f.params, &f.global, &[0, 2]).unwrap();
    assert_eq!(out.probabilities[1], out.probabilities[3]);
}

#[test]
fn permutation_equivariance() {
    let perm = [3usize, 0, 4, 1, 2];
    let seqs = vec![
        UserSequence::new(0, vec![0, 1, 2, 1]),
        UserSequence::new(1, vec![2, 3, 4]),
        UserSequence::new(2, vec![4, 0, 0, 3]),
    ];
    let cfg = ModelConfig::new(4, 2);
    let params = ModelParams::init(3, 5, &cfg, 13).unwrap();
    let g = GlobalIndex::new(&build_global_graph(&seqs, 3, 5).unwrap(), &params).unwrap();
    let base = forward(&params, &g, &[0, 2, 1]).unwrap();

    let pseqs: Vec<UserSequence> = seqs
        .iter()
        .map(|s| UserSequence::new(s.user, s.items.iter().map(|&i| perm[i]).collect()))
        .collect();
    let mut pparams = params.clone();
    let emb = params.block("item_embeddings").unwrap();
    let pemb = pparams.block_mut("item_embeddings").unwrap();
    for i in 0..5 {
        pemb.row_mut(perm[i]).assign(&emb.row(i));
    }
    let pg = GlobalIndex::new(&build_global_graph(&pseqs, 3, 5).unwrap(), &pparams).unwrap();
    let out = forward(&pparams, &pg, &[perm[0], perm[2], perm[1]]).unwrap();
    for i in 0..5 {
        assert!((out.scores[perm[i]] - base.scores[i]).abs() < 1e-12);
    }
}

#[test]
fn every_ball_point_stays_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..200 {
        let mut cfg = ModelConfig::new(4, 1 + seed as usize % 3);
        cfg.init_std = [0.1, 1.0, 5.0][seed as usize % 3];
        let f = fixture(cfg.clone(), seed);
        let len = rng.random_range(1..6);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..5)).collect();
        let out = forward(&f.params, &f.global, &seq).unwrap();
        let max = cfg.max_norm() + 1e-15;
        let n: f64 = out.user_point.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n <= max);
        for row in out.item_points.rows() {
            assert!(row.dot(&row).sqrt() <= max);
        }
        assert!(out.scores.iter().all(|s| s.is_finite()));
    }
}

#[test]
fn unknown_items_map_to_reserved_row() {
    let f = fixture(ModelConfig::new(4, 1), 15);
    let a = forward(&f.params, &f.global, &[0, 99]).unwrap();
    let b = forward(&f.params, &f.global, &[0, 5]).unwrap();
    assert_eq!(a.scores, b.scores);
}

#[test]
fn batched_scores_match_single_forwards() {
    let f = fixture(ModelConfig::new(4, 2), 16);
    let seqs: [&[usize]; 3] = [&[0, 1], &[2, 2, 3, 4], &[1]];
    let repr = item_representation_values(&f.params, &f.global).unwrap();
    let batch = score_batch(&f.params, &repr, &seqs).unwrap();
    for (b, s) in seqs.iter().enumerate() {
        let single = forward(&f.params, &f.global, s).unwrap();
        for (x, y) in batch.row(b).iter().zip(&single.scores) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
