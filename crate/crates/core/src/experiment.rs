//! Train-then-evaluate runs, the ablation matrix and the hyper-parameter grid.

use std::fmt::Write as _;

use crate::data::DatasetSplit;
use crate::error::Result;
use crate::eval::{evaluate, RankingMetrics};
use crate::model::{Ablation, GlobalIndex, Inner, ModelConfig, ModelParams, Variant};
use crate::train::{fit_with, CurveRow, FitResult, TrainConfig};

pub const GRID_DIMS: [usize; 5] = [8, 16, 32, 64, 128];
pub const GRID_LAYERS: [usize; 5] = [1, 2, 3, 4, 5];
pub const GRID_OMEGAS: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub label: String,
    pub model: ModelConfig,
    pub fit: FitResult,
    pub test: RankingMetrics,
}

/// Initialises parameters from `train.seed`, fits, and scores the best
/// checkpoint on the test part.
pub fn train_and_evaluate(
    split: &DatasetSplit,
    model: &ModelConfig,
    train: &TrainConfig,
    ks: &[usize],
    on_epoch: impl FnMut(&CurveRow),
) -> Result<RunOutcome> {
    let params = ModelParams::init(split.n_users(), split.n_items(), model, train.seed)?;
    let global = GlobalIndex::new(&split.global_graph()?, &params)?;
    let fit = fit_with(params, &global, &split.train, &split.valid, train, on_epoch)?;
    let test = evaluate(&fit.params, &global, &split.test, ks)?;
    Ok(RunOutcome {
        label: model.label(),
        model: model.clone(),
        fit,
        test,
    })
}

/// The eight compared variants, derived from `base`.
pub fn ablation_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut full = base.clone();
    full.variant = Variant::Poincare;
    full.inner = Inner::Geodesic;
    full.ablation = Ablation::default();
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = full.clone();
        f(&mut c);
        c
    };
    vec![
        full.clone(),
        with(&|c| c.variant = Variant::Euclidean),
        with(&|c| c.inner = Inner::Projected),
        with(&|c| c.ablation.no_global = true),
        with(&|c| c.ablation.no_local = true),
        with(&|c| c.ablation.no_long = true),
        with(&|c| c.ablation.no_short = true),
        with(&|c| {
            c.ablation.no_long = true;
            c.ablation.no_short = true;
        }),
    ]
}

/// Side-by-side test metrics of several runs.
pub fn comparison_table(dataset: &str, runs: &[RunOutcome]) -> String {
    let mut s = String::new();
    let Some(first) = runs.first() else {
        return s;
    };
    let _ = write!(s, "{:<20}", dataset);
    for &k in &first.test.ks {
        let _ = write!(s, " {:>8} {:>8} {:>8}", format!("H@{k}"), format!("N@{k}"), format!("M@{k}"));
    }
    s.push('\n');
    for r in runs {
        let _ = write!(s, "{:<20}", r.label);
        for j in 0..r.test.ks.len() {
            let _ = write!(
                s,
                " {:>8.2} {:>8.2} {:>8.2}",
                100.0 * r.test.hit[j],
                100.0 * r.test.ndcg[j],
                100.0 * r.test.map[j]
            );
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub dim: usize,
    pub layers: usize,
    pub omega: f64,
}

pub fn grid_points(dims: &[usize], layers: &[usize], omegas: &[f64]) -> Vec<GridPoint> {
    let mut out = Vec::new();
    for &dim in dims {
        for &l in layers {
            for &omega in omegas {
                out.push(GridPoint { dim, layers: l, omega });
            }
        }
    }
    out
}

/// `base` with the point's dimension, depth and ω; layer mixes reset to uniform.
pub fn configs_at(base: &ModelConfig, train: &TrainConfig, p: &GridPoint) -> (ModelConfig, TrainConfig) {
    let mut m = base.clone();
    m.dim = p.dim;
    m.layers = p.layers;
    m.alpha = vec![1.0 / (p.layers as f64 + 1.0); p.layers + 1];
    m.zeta = m.alpha.clone();
    let mut t = train.clone();
    t.omega = p.omega;
    (m, t)
}

pub const GRID_CSV_HEADER: &str = "dim,layers,omega,best_epoch,valid_total,valid_h10,test_hit_first_k\n";

/// One row per grid run; the row with the lowest validation loss is the
/// selected setting.
pub fn grid_csv(points: &[GridPoint], runs: &[RunOutcome]) -> String {
    let mut s = String::from(GRID_CSV_HEADER);
    for (p, r) in points.iter().zip(runs) {
        let best = r.fit.report.best_epoch;
        let (valid, h10) = if best == 0 {
            (r.fit.initial_valid.total, f64::NAN)
        } else {
            let row = &r.fit.curve[best - 1];
            (row.valid.total, row.valid_h10)
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            p.dim,
            p.layers,
            p.omega,
            best,
            valid,
            h10,
            r.test.hit.first().copied().unwrap_or(f64::NAN)
        );
    }
    s
}

/// Index of the run with the lowest best validation loss.
pub fn select_best(runs: &[RunOutcome]) -> Option<usize> {
    let loss = |r: &RunOutcome| match r.fit.report.best_epoch {
        0 => r.fit.initial_valid.total,
        e => r.fit.curve[e - 1].valid.total,
    };
    (0..runs.len()).min_by(|&a, &b| loss(&runs[a]).total_cmp(&loss(&runs[b])))
}
