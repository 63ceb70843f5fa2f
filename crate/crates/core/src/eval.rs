//! Top-K ranking metrics, region analysis of embeddings, and CSV exports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::UserSequence;
use crate::model::{
    item_representation_values, score_batch, ForwardOutput, GlobalIndex, ModelParams, Variant,
};

/// Default cutoffs.
pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Sequences scored per tape during evaluation.
const EVAL_CHUNK: usize = 64;

/// 1-based rank of `target` when items are sorted by descending score, ties
/// going to the lower item index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// Full ranking (item indices, best first) with the same tie rule.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Hit, NDCG and MAP contributions of a single relevant item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub hit: f64,
    pub ndcg: f64,
    pub map: f64,
}

/// Contribution when the target sits at 1-based `rank`.
pub fn contribution_from_rank(rank: usize, k: usize) -> Contribution {
    if rank >= 1 && rank <= k {
        Contribution {
            hit: 1.0,
            ndcg: 1.0 / ((rank + 1) as f64).log2(),
            map: 1.0 / rank as f64,
        }
    } else {
        Contribution {
            hit: 0.0,
            ndcg: 0.0,
            map: 0.0,
        }
    }
}

/// Scans `ranked` (best first) for `target`.
pub fn metrics_at_k(ranked: &[usize], target: usize, k: usize) -> Result<Contribution> {
    if k > ranked.len() {
        return Err(Error::Contract(format!(
            "K = {k} exceeds the {} ranked candidates",
            ranked.len()
        )));
    }
    let rank = ranked[..k]
        .iter()
        .position(|&i| i == target)
        .map_or(usize::MAX, |p| p + 1);
    Ok(contribution_from_rank(rank, k))
}

/// Averaged metrics per cutoff, as fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    pub ks: Vec<usize>,
    pub hit: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub map: Vec<f64>,
    pub count: usize,
}

impl RankingMetrics {
    /// Averages the contributions of the given 1-based target ranks.
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Data("no sequences to evaluate".into()));
        }
        let n = ranks.len() as f64;
        let mut out = Self {
            ks: ks.to_vec(),
            hit: Vec::new(),
            ndcg: Vec::new(),
            map: Vec::new(),
            count: ranks.len(),
        };
        for &k in ks {
            let (mut h, mut g, mut m) = (0.0, 0.0, 0.0);
            for &r in ranks {
                let c = contribution_from_rank(r, k);
                h += c.hit;
                g += c.ndcg;
                m += c.map;
            }
            out.hit.push(h / n);
            out.ndcg.push(g / n);
            out.map.push(m / n);
        }
        Ok(out)
    }

    pub fn hit_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.hit[p])
    }

    /// Aligned text table, values ×100.
    pub fn table(&self, dataset: &str, variant: &str) -> String {
        let mut s = format!(
            "{:<12} {:<16} {:>4} {:>8} {:>8} {:>8}\n",
            "dataset", "variant", "K", "H", "N", "M"
        );
        for (p, k) in self.ks.iter().enumerate() {
            let _ = writeln!(
                s,
                "{:<12} {:<16} {:>4} {:>8.2} {:>8.2} {:>8.2}",
                dataset,
                variant,
                k,
                100.0 * self.hit[p],
                100.0 * self.ndcg[p],
                100.0 * self.map[p]
            );
        }
        s
    }

    /// CSV rows (no header), values ×100.
    pub fn csv_rows(&self, dataset: &str, variant: &str) -> String {
        let mut s = String::new();
        for (p, k) in self.ks.iter().enumerate() {
            let _ = writeln!(
                s,
                "{dataset},{variant},{k},{},{},{}",
                100.0 * self.hit[p],
                100.0 * self.ndcg[p],
                100.0 * self.map[p]
            );
        }
        s
    }
}

pub const METRICS_CSV_HEADER: &str = "dataset,variant,K,H,N,M\n";

/// `(input, target)` for a sequence: everything but the last item predicts
/// the last.
pub fn split_example(seq: &UserSequence) -> Result<(&[usize], usize)> {
    match seq.split_target() {
        Some((input, target)) if !input.is_empty() => Ok((input, target)),
        _ => Err(Error::Data(format!(
            "user {} has fewer than 2 items; nothing to predict",
            seq.user
        ))),
    }
}

/// Rank of each sequence's last item given its prefix, over the full
/// catalog. Parallel over chunks; the output order follows `seqs`.
pub fn target_ranks(params: &ModelParams, global: &GlobalIndex, seqs: &[UserSequence]) -> Result<Vec<usize>> {
    let repr = item_representation_values(params, global)?;
    let n_items = params.n_items();
    let chunks: Vec<Result<Vec<usize>>> = seqs
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let examples: Vec<(&[usize], usize)> =
                chunk.iter().map(split_example).collect::<Result<_>>()?;
            if let Some(&(_, t)) = examples.iter().find(|&&(_, t)| t >= n_items) {
                return Err(Error::Data(format!("target item {t} outside the catalog")));
            }
            let inputs: Vec<&[usize]> = examples.iter().map(|e| e.0).collect();
            let scores = score_batch(params, &repr, &inputs)?;
            Ok(examples
                .iter()
                .enumerate()
                .map(|(b, &(_, t))| rank_of(scores.row(b).as_slice().expect("row"), t))
                .collect())
        })
        .collect();
    let mut ranks = Vec::with_capacity(seqs.len());
    for c in chunks {
        ranks.extend(c?);
    }
    Ok(ranks)
}

/// Full-catalog ranking metrics of the model on `seqs`.
pub fn evaluate(
    params: &ModelParams,
    global: &GlobalIndex,
    seqs: &[UserSequence],
    ks: &[usize],
) -> Result<RankingMetrics> {
    if seqs.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    RankingMetrics::from_ranks(&target_ranks(params, global, seqs)?, ks)
}

/// Interaction counts per item over `seqs`.
pub fn item_counts(seqs: &[UserSequence], n_items: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_items];
    for s in seqs {
        for &i in &s.items {
            if i < n_items {
                counts[i] += 1.0;
            }
        }
    }
    counts
}

/// Ranks every test target by training popularity.
pub fn evaluate_popularity(
    train: &[UserSequence],
    test: &[UserSequence],
    n_items: usize,
    ks: &[usize],
) -> Result<RankingMetrics> {
    let scores = item_counts(train, n_items);
    let ranks: Vec<usize> = test
        .iter()
        .map(|s| {
            let (_, t) = split_example(s)?;
            if t >= n_items {
                return Err(Error::Data(format!("target item {t} outside the catalog")));
            }
            Ok(rank_of(&scores, t))
        })
        .collect::<Result<_>>()?;
    RankingMetrics::from_ranks(&ranks, ks)
}

/// Items grouped into four bands by distance to the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub boundaries: [f64; 3],
    pub counts: [usize; 4],
    /// Mean interaction count per band; NaN for an empty band.
    pub mean_interactions: [f64; 4],
}

impl RegionReport {
    /// Mean interaction counts never increase from band 1 to 4 (empty
    /// bands are skipped).
    pub fn is_nonincreasing(&self) -> bool {
        let present: Vec<f64> = self
            .mean_interactions
            .iter()
            .copied()
            .filter(|x| !x.is_nan())
            .collect();
        present.windows(2).all(|w| w[0] >= w[1])
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("region,lower,upper,items,mean_interactions\n");
        for r in 0..4 {
            let lo = if r == 0 { 0.0 } else { self.boundaries[r - 1] };
            let hi = if r == 3 { f64::INFINITY } else { self.boundaries[r] };
            let _ = writeln!(
                s,
                "{},{lo},{hi},{},{}",
                r + 1,
                self.counts[r],
                self.mean_interactions[r]
            );
        }
        s
    }
}

/// Distance of every catalog item point from the origin: the geodesic
/// distance in the ball, the vector norm in the Euclidean variant.
pub fn origin_distances(params: &ModelParams) -> Vec<f64> {
    let cfg = params.config();
    let emb = params.blocks()[crate::model::Layout::ITEMS].clone();
    let sc = cfg.c.sqrt();
    emb.rows()
        .into_iter()
        .take(params.n_items())
        .map(|row| {
            let n = row.dot(&row).sqrt();
            match cfg.variant {
                Variant::Euclidean => n,
                // The point is exp0 of the pre-image, at norm tanh(√c n)/√c
                // (capped by the guard), and its distance is 2/√c·atanh(√c‖x‖).
                Variant::Poincare => {
                    let r = ((sc * n).tanh() / sc).min(cfg.max_norm());
                    2.0 / sc * crate::geometry::clamped_atanh(sc * r)
                }
            }
        })
        .collect()
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Assigns each item to the band of its distance (`d ≤ b1` → band 1,
/// `b1 < d ≤ b2` → band 2, ...). Boundaries default to the 25/50/75th
/// percentiles of the distances.
pub fn region_analysis(
    distances: &[f64],
    interactions: &[f64],
    boundaries: Option<[f64; 3]>,
) -> Result<RegionReport> {
    if distances.len() != interactions.len() {
        return Err(Error::shape(format!(
            "{} distances but {} interaction counts",
            distances.len(),
            interactions.len()
        )));
    }
    if distances.is_empty() {
        return Err(Error::Data("no items to analyse".into()));
    }
    let boundaries = match boundaries {
        Some(b) => {
            if !(b[0] < b[1] && b[1] < b[2]) {
                return Err(Error::Config(format!(
                    "region boundaries must increase strictly, got {b:?}"
                )));
            }
            b
        }
        None => {
            let mut s = distances.to_vec();
            s.sort_by(f64::total_cmp);
            [percentile(&s, 0.25), percentile(&s, 0.5), percentile(&s, 0.75)]
        }
    };
    let mut counts = [0usize; 4];
    let mut sums = [0.0; 4];
    for (&d, &n) in distances.iter().zip(interactions) {
        let band = boundaries.iter().filter(|&&b| d > b).count();
        counts[band] += 1;
        sums[band] += n;
    }
    let mut mean_interactions = [f64::NAN; 4];
    for r in 0..4 {
        if counts[r] > 0 {
            mean_interactions[r] = sums[r] / counts[r] as f64;
        }
    }
    Ok(RegionReport {
        boundaries,
        counts,
        mean_interactions,
    })
}

/// One sequence's attention, ready for export.
pub struct AttentionRecord<'a> {
    pub sequence: String,
    pub items: &'a [usize],
    pub output: &'a ForwardOutput,
}

pub const ATTENTION_CSV_HEADER: &str = "sequence,view,query_position,key_position,item,weight\n";

/// Short-view weights (one row per position) and the long-view matrix (one
/// row per query/key pair), as CSV text.
pub fn attention_csv(records: &[AttentionRecord<'_>]) -> String {
    let mut s = String::from(ATTENTION_CSV_HEADER);
    for r in records {
        for (p, g) in r.output.short_attention.iter().enumerate() {
            let _ = writeln!(s, "{},short,{p},,{},{g}", r.sequence, r.items[p]);
        }
        for ((q, k), a) in r.output.long_attention.indexed_iter() {
            let _ = writeln!(s, "{},long,{q},{k},{},{a}", r.sequence, r.items[k]);
        }
    }
    s
}

pub fn export_attention(records: &[AttentionRecord<'_>], path: &Path) -> Result<()> {
    fs::write(path, attention_csv(records)).map_err(|e| Error::io(path, e))
}
