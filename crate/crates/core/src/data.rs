//! Interaction logs, vocabularies, the 80/10/10 split and synthetic data.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_global_graph, GlobalGraph, UserSequence};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const SPLIT_FILES: [&str; 3] = ["train_users.txt", "valid_users.txt", "test_users.txt"];
pub const DEFAULT_MIN_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseOutcome {
    pub records: Vec<InteractionRecord>,
    /// Lines that were skipped; never longer than the tolerated count.
    pub malformed: Vec<Malformed>,
}

fn parse_line(line: &str) -> std::result::Result<InteractionRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 3 {
        return Err(format!("expected 3 tab-separated fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".into());
    }
    let timestamp = fields[2]
        .trim()
        .parse::<u64>()
        .map_err(|_| format!("timestamp {:?} is not a non-negative integer", fields[2]))?;
    Ok(InteractionRecord {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        timestamp,
    })
}

/// Reads `user<TAB>item<TAB>timestamp` lines. `#` lines and blank lines are
/// skipped. Up to `max_malformed` bad lines are tolerated and reported; the
/// next one is a parse error.
pub fn parse_interactions<R: BufRead>(reader: R, max_malformed: usize) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line) {
            Ok(r) => out.records.push(r),
            Err(reason) => {
                if out.malformed.len() >= max_malformed {
                    return Err(Error::Parse {
                        line: line_no,
                        message: reason,
                    });
                }
                out.malformed.push(Malformed {
                    line: line_no,
                    reason,
                });
            }
        }
    }
    Ok(out)
}

pub fn read_interactions(path: &Path, max_malformed: usize) -> Result<ParseOutcome> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(BufReader::new(f), max_malformed)
}

pub fn write_interactions<W: Write>(records: &[InteractionRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
    }
    w.flush()
}

/// Bidirectional map between string ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of `id`, assigning the next one if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&k) = self.index.get(id) {
            return k;
        }
        let k = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), k);
        k
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, k: usize) -> Option<&str> {
        self.ids.get(k).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Sequences with the vocabularies that index them.
///
/// Users are numbered by first appearance in the log; items by first
/// appearance when walking the finished sequences in user order, so writing
/// a corpus back out and rebuilding it gives the same indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<UserSequence>,
    pub timestamps: Vec<Vec<u64>>,
    pub users: Vocabulary,
    pub items: Vocabulary,
}

pub fn build_sequences(records: &[InteractionRecord], min_len: usize) -> Corpus {
    let mut order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<(u64, usize, &str)>> = HashMap::new();
    for (pos, r) in records.iter().enumerate() {
        let e = by_user.entry(r.user.as_str()).or_insert_with(|| {
            order.push(r.user.as_str());
            Vec::new()
        });
        e.push((r.timestamp, pos, r.item.as_str()));
    }
    let mut users = Vocabulary::new();
    let mut items = Vocabulary::new();
    let mut sequences = Vec::new();
    let mut timestamps = Vec::new();
    for u in order {
        let mut events = by_user.remove(u).unwrap_or_default();
        if events.len() < min_len {
            continue;
        }
        events.sort_by_key(|&(t, pos, _)| (t, pos));
        let user = users.intern(u);
        sequences.push(UserSequence::new(
            user,
            events.iter().map(|&(_, _, i)| items.intern(i)).collect(),
        ));
        timestamps.push(events.iter().map(|&(t, _, _)| t).collect());
    }
    Corpus {
        sequences,
        timestamps,
        users,
        items,
    }
}

impl Corpus {
    /// Wraps index sequences with generated ids `u<k>` / `i<k>` that keep
    /// the indices, and positional timestamps.
    pub fn from_indexed(sequences: Vec<UserSequence>, n_users: usize, n_items: usize) -> Self {
        let mut users = Vocabulary::new();
        let mut items = Vocabulary::new();
        for u in 0..n_users {
            users.intern(&format!("u{u}"));
        }
        for i in 0..n_items {
            items.intern(&format!("i{i}"));
        }
        let timestamps = sequences.iter().map(|s| (0..s.len() as u64).collect()).collect();
        Self {
            sequences,
            timestamps,
            users,
            items,
        }
    }

    pub fn records(&self) -> Vec<InteractionRecord> {
        let mut out = Vec::new();
        for (s, ts) in self.sequences.iter().zip(&self.timestamps) {
            let user = self.users.id(s.user).unwrap_or_default();
            for (&i, &t) in s.items.iter().zip(ts) {
                out.push(InteractionRecord {
                    user: user.to_string(),
                    item: self.items.id(i).unwrap_or_default().to_string(),
                    timestamp: t,
                });
            }
        }
        out
    }
}

/// Sizes of the train/valid/test parts for `n` sequences.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.8 * n as f64).round() as usize;
    let valid = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, valid, n - train - valid)
}

/// Positions of the sequences in each part, after a seeded shuffle.
pub fn split_indices(n: usize, seed: u64) -> Result<[Vec<usize>; 3]> {
    if n < 10 {
        return Err(Error::Data(format!("need at least 10 sequences to split, got {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b, _) = split_sizes(n);
    let test = perm.split_off(a + b);
    let valid = perm.split_off(a);
    Ok([perm, valid, test])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<UserSequence>,
    pub valid: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
    pub users: Vocabulary,
    pub items: Vocabulary,
}

pub fn split(corpus: &Corpus, seed: u64) -> Result<DatasetSplit> {
    let parts = split_indices(corpus.sequences.len(), seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&k| corpus.sequences[k].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&parts[0]),
        valid: pick(&parts[1]),
        test: pick(&parts[2]),
        users: corpus.users.clone(),
        items: corpus.items.clone(),
    })
}

impl DatasetSplit {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn parts(&self) -> [&[UserSequence]; 3] {
        [&self.train, &self.valid, &self.test]
    }

    /// The user-item graph over the training part.
    pub fn global_graph(&self) -> Result<GlobalGraph> {
        build_global_graph(&self.train, self.n_users(), self.n_items())
    }

    /// Writes the interaction log and one user-id file per part.
    pub fn save(&self, dir: &Path, corpus: &Corpus) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(INTERACTIONS_FILE);
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_interactions(&corpus.records(), std::io::BufWriter::new(f)).map_err(|e| Error::io(&path, e))?;
        for (name, part) in SPLIT_FILES.iter().zip(self.parts()) {
            let path = dir.join(name);
            let mut s = String::new();
            for seq in part {
                s.push_str(self.users.id(seq.user).unwrap_or_default());
                s.push('\n');
            }
            fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a directory written by [`DatasetSplit::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let outcome = read_interactions(&dir.join(INTERACTIONS_FILE), 0)?;
        let corpus = build_sequences(&outcome.records, 1);
        let mut by_user: Vec<Option<&UserSequence>> = vec![None; corpus.users.len()];
        for s in &corpus.sequences {
            by_user[s.user] = Some(s);
        }
        let mut seen = vec![false; corpus.users.len()];
        let mut parts: Vec<Vec<UserSequence>> = Vec::new();
        for name in SPLIT_FILES {
            let path = dir.join(name);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut part = Vec::new();
            for id in text.lines().filter(|l| !l.is_empty()) {
                let u = corpus
                    .users
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("{name}: unknown user {id:?}")))?;
                if std::mem::replace(&mut seen[u], true) {
                    return Err(Error::Data(format!("{name}: user {id:?} listed twice")));
                }
                part.extend(by_user[u].cloned());
            }
            parts.push(part);
        }
        let test = parts.pop().unwrap_or_default();
        let valid = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        Ok(Self {
            train,
            valid,
            test,
            users: corpus.users,
            items: corpus.items,
        })
    }
}

/// Parameters of the synthetic generator.
///
/// Item `k` has popularity weight `(k + 1)^-exponent` and belongs to cluster
/// `k % clusters`. Every user gets a random home cluster; each draw comes
/// from the home cluster with probability `affinity`, otherwise from the
/// whole catalog, always in proportion to popularity. Items are not repeated
/// within a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub clusters: usize,
    pub affinity: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn hierarchical(n_users: usize, n_items: usize, exponent: f64, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            exponent,
            min_len,
            max_len,
            clusters: n_items.clamp(1, 10),
            affinity: 0.8,
            seed,
        }
    }

    /// Uniform popularity and every draw from the home cluster.
    pub fn separable(n_users: usize, n_items: usize, clusters: usize, min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            n_users,
            n_items,
            exponent: 0.0,
            min_len,
            max_len,
            clusters,
            affinity: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("synthetic data needs at least one user and one item".into());
        }
        if !(self.exponent >= 0.0 && self.exponent.is_finite()) {
            return bad(format!("exponent must be finite and >= 0, got {}", self.exponent));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.clusters == 0 || self.clusters > self.n_items {
            return bad(format!("clusters must be in 1..={}, got {}", self.n_items, self.clusters));
        }
        if !(0.0..=1.0).contains(&self.affinity) {
            return bad(format!("affinity must be in [0, 1], got {}", self.affinity));
        }
        Ok(())
    }
}

/// Cumulative popularity over a subset of items.
struct Sampler {
    items: Vec<usize>,
    cum: Vec<f64>,
}

impl Sampler {
    fn new(items: Vec<usize>, weight: &[f64]) -> Self {
        let mut acc = 0.0;
        let cum = items
            .iter()
            .map(|&i| {
                acc += weight[i];
                acc
            })
            .collect();
        Self { items, cum }
    }

    fn draw(&self, taken: &[bool], weight: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
        let total = *self.cum.last()?;
        if total > 0.0 {
            for _ in 0..64 {
                let x = rng.random::<f64>() * total;
                let k = self.cum.partition_point(|&c| c <= x).min(self.items.len() - 1);
                if !taken[self.items[k]] {
                    return Some(self.items[k]);
                }
            }
        }
        // Most of the mass is taken: draw exactly from what is left.
        let free: Vec<usize> = self.items.iter().copied().filter(|&i| !taken[i]).collect();
        let first = *free.first()?;
        let rest: f64 = free.iter().map(|&i| weight[i]).sum();
        if !(rest > 0.0) {
            return Some(first);
        }
        let mut x = rng.random::<f64>() * rest;
        for &i in &free {
            x -= weight[i];
            if x < 0.0 {
                return Some(i);
            }
        }
        free.last().copied()
    }
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<UserSequence>> {
    cfg.validate()?;
    let m = cfg.n_items;
    let weight: Vec<f64> = (0..m).map(|k| ((k + 1) as f64).powf(-cfg.exponent)).collect();
    let global = Sampler::new((0..m).collect(), &weight);
    let local: Vec<Sampler> = (0..cfg.clusters)
        .map(|c| Sampler::new((c..m).step_by(cfg.clusters).collect(), &weight))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = vec![false; m];
    let mut out = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let home = rng.random_range(0..cfg.clusters);
        let len = rng.random_range(cfg.min_len..=cfg.max_len).min(m);
        let mut items = Vec::with_capacity(len);
        while items.len() < len {
            let s = if rng.random::<f64>() < cfg.affinity { &local[home] } else { &global };
            let i = match s.draw(&taken, &weight, &mut rng) {
                Some(i) => i,
                // Home cluster exhausted.
                None => match global.draw(&taken, &weight, &mut rng) {
                    Some(i) => i,
                    None => break,
                },
            };
            taken[i] = true;
            items.push(i);
        }
        for &i in &items {
            taken[i] = false;
        }
        out.push(UserSequence::new(u, items));
    }
    Ok(out)
}

/// Long-tailed sequences with latent user clusters; `exponent` must exceed 1.
pub fn synth_hierarchical(
    n_users: usize,
    n_items: usize,
    exponent: f64,
    len: (usize, usize),
    seed: u64,
) -> Result<Vec<UserSequence>> {
    if !(exponent > 1.0) {
        return Err(Error::Config(format!("power-law exponent must exceed 1, got {exponent}")));
    }
    synthesize(&SynthConfig::hierarchical(n_users, n_items, exponent, len.0, len.1, seed))
}

/// Maximum-likelihood exponent of a power law `p(r) ∝ r^-s` truncated to
/// ranks `lo..=hi`, from the observed `(rank, count)` pairs.
pub fn fit_power_law(observed: &[(usize, f64)], lo: usize, hi: usize) -> Result<f64> {
    let (mut n, mut sum_ln) = (0.0, 0.0);
    for &(r, c) in observed {
        if (lo..=hi).contains(&r) {
            n += c;
            sum_ln += c * (r as f64).ln();
        }
    }
    if !(n > 0.0) || lo == 0 || lo >= hi {
        return Err(Error::Data("no observations in the fitted rank range".into()));
    }
    let target = sum_ln / n;
    // Expected ln r under the truncated law decreases in s.
    let expected = |s: f64| {
        let (mut z, mut acc) = (0.0, 0.0);
        for r in lo..=hi {
            let lr = (r as f64).ln();
            let w = (-s * lr).exp();
            z += w;
            acc += w * lr;
        }
        acc / z
    };
    let (mut a, mut b) = (0.0, 20.0);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if expected(mid) > target {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Whole-sequence interaction counts per item.
pub fn frequencies(seqs: &[UserSequence], n_items: usize) -> Vec<usize> {
    let mut f = vec![0; n_items];
    for s in seqs {
        for &i in &s.items {
            f[i] += 1;
        }
    }
    f
}

#[cfg(test)]
mod tests;
