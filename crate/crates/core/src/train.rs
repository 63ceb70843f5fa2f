//! Joint cross-entropy + contrastive-ranking training with early stopping.

use std::collections::HashSet;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Index, Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{rank_of, split_example};
use crate::geometry::BallConfig;
use crate::graph::UserSequence;
use crate::model::{
    batch_forward, item_representations, sequence_forward, BatchPlan, GlobalIndex, ModelConfig,
    ModelParams, ParamVars, Space, Variant,
};

const PROB_CLAMP: f64 = 1e-12;
const VALID_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the contrastive-ranking term.
    pub omega: f64,
    /// Hinge margin ξ.
    pub margin: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            omega: 0.1,
            margin: 0.1,
            patience: 10,
            max_epochs: 100,
            seed: 0,
            negatives: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be nonnegative, got {}", self.omega));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be nonnegative, got {}", self.margin));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, cr: f64, omega: f64) -> Self {
        Self {
            ce,
            cr,
            total: ce + omega * cr,
        }
    }
}

/// Binary cross-entropy of a probability vector against a one-hot target,
/// summed over all items.
pub fn ce_loss(probabilities: &[f64], target: usize) -> f64 {
    probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if i == target {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Hinge `max(d(u, pos) − d(u, neg) + margin, 0)` with the model's distance.
pub fn cr_loss(user: &[f64], positive: &[f64], negative: &[f64], margin: f64, cfg: &ModelConfig) -> Result<f64> {
    let (dp, dn) = match cfg.variant {
        Variant::Euclidean => {
            let d = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
            };
            (d(user, positive), d(user, negative))
        }
        Variant::Poincare => {
            let ball = BallConfig::with_boundary_eps(cfg.c, user.len(), cfg.boundary_eps)?;
            let u = ball.point(user.to_vec())?;
            (
                ball.distance(&u, &ball.point(positive.to_vec())?)?,
                ball.distance(&u, &ball.point(negative.to_vec())?)?,
            )
        }
    };
    Ok((dp - dn + margin).max(0.0))
}

/// Per-example cross-entropy, `B×1`.
pub fn ce_loss_var<'t>(probabilities: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let [b, m] = probabilities.shape();
    if targets.len() != b {
        return Err(Error::shape(format!("{} targets for {b} rows", targets.len())));
    }
    let mut onehot = Array2::<f64>::zeros((b, m));
    for (r, &t) in targets.iter().enumerate() {
        onehot[[r, t]] = 1.0;
    }
    let tape = probabilities.tape();
    let y = tape.constant_array(onehot.clone());
    let not_y = tape.constant_array(onehot.mapv(|v| 1.0 - v));
    // ln floors its argument at 1e-12, which is the probability clamp.
    let pos = probabilities.ln()?.mul(y)?;
    let neg = probabilities.neg()?.add_scalar(1.0)?.ln()?.mul(not_y)?;
    pos.add(neg)?.row_sum()?.neg()
}

/// Per-example contrastive hinge, averaged over each example's negatives,
/// `B×1`. `negatives` holds `k` entries per example, example-major.
pub fn cr_loss_var<'t>(
    space: &Space,
    users: Var<'t>,
    items: Var<'t>,
    positives: &[usize],
    negatives: &[usize],
    margin: f64,
) -> Result<Var<'t>> {
    let b = positives.len();
    if b == 0 || !negatives.len().is_multiple_of(b) {
        return Err(Error::shape(format!(
            "{} negatives for {b} examples",
            negatives.len()
        )));
    }
    let k = negatives.len() / b;
    let rep: Index = Arc::from((0..b).flat_map(|r| std::iter::repeat_n(r, k)).collect::<Vec<_>>());
    let pos_rep: Index = Arc::from(rep.iter().map(|&r| positives[r]).collect::<Vec<_>>());
    let neg: Index = Arc::from(negatives.to_vec());
    let u = users.gather_rows(&rep)?;
    let dp = space.distance(u, items.gather_rows(&pos_rep)?)?;
    let dn = space.distance(u, items.gather_rows(&neg)?)?;
    let hinge = dp.sub(dn)?.add_scalar(margin)?.relu()?;
    hinge.segment_sum(&rep, b)?.scale(1.0 / k as f64)
}

/// One training example: input prefix, target and sampled negatives.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub input: &'a [usize],
    pub target: usize,
    pub negatives: Vec<usize>,
}

/// Draws `k` negatives uniformly from items absent from `seq`. Falls back
/// to any item other than the target when the sequence covers the catalog.
pub fn sample_negatives(seq: &[usize], n_items: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let seen: HashSet<usize> = seq.iter().copied().collect();
    let target = seq.last().copied();
    let allowed: Box<dyn Fn(usize) -> bool> = if seen.len() < n_items {
        Box::new(|i| !seen.contains(&i))
    } else if n_items > 1 {
        Box::new(|i| Some(i) != target)
    } else {
        Box::new(|_| true)
    };
    (0..k)
        .map(|_| loop {
            let i = rng.random_range(0..n_items);
            if allowed(i) {
                break i;
            }
        })
        .collect()
}

/// Builds examples from whole sequences with freshly sampled negatives.
pub fn make_examples<'a>(
    seqs: &'a [UserSequence],
    n_items: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Example<'a>>> {
    seqs.iter()
        .map(|s| {
            let (input, target) = split_example(s)?;
            if target >= n_items {
                return Err(Error::Data(format!("target item {target} outside the catalog")));
            }
            Ok(Example {
                input,
                target,
                negatives: sample_negatives(&s.items, n_items, k, rng),
            })
        })
        .collect()
}

/// Mean losses over a batch, on `tape`. Returns the scalar objective and
/// the per-example scores (for ranking).
fn batch_objective<'t>(
    pv: &ParamVars<'t>,
    params: &ModelParams,
    global: Option<&GlobalIndex>,
    item_repr: Option<&Array2<f64>>,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(Var<'t>, LossBreakdown, Var<'t>)> {
    let inputs: Vec<&[usize]> = batch.iter().map(|e| e.input).collect();
    let plan = BatchPlan::new(&inputs, params.n_items())?;
    let out = match (global, item_repr) {
        (Some(g), _) => batch_forward(pv, params, g, &plan)?,
        (None, Some(r)) => {
            let tape = pv.get(0).tape();
            let repr = tape.constant_array(r.clone());
            sequence_forward(pv, params.config(), repr, &plan, params.n_items())?
        }
        (None, None) => {
            return Err(Error::Contract("need a graph or item representations".into()));
        }
    };
    let space = Space::new(params.config());
    let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
    let negatives: Vec<usize> = batch.iter().flat_map(|e| e.negatives.iter().copied()).collect();
    let probs = out.scores.softmax(1)?;
    let ce = ce_loss_var(probs, &targets)?.mean()?;
    let cr = cr_loss_var(&space, out.users, out.items, &targets, &negatives, cfg.margin)?.mean()?;
    let total = if cfg.omega == 0.0 {
        ce
    } else {
        ce.add(cr.scale(cfg.omega)?)?
    };
    let breakdown = LossBreakdown::new(ce.item()?, cr.item()?, cfg.omega);
    Ok((total, breakdown, out.scores))
}

/// Mean total loss of `batch` as a tape scalar, with parameters taken
/// from `pv`.
pub fn objective<'t>(
    pv: &ParamVars<'t>,
    params: &ModelParams,
    global: &GlobalIndex,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<Var<'t>> {
    batch_objective(pv, params, Some(global), None, batch, cfg).map(|r| r.0)
}

/// Per-parameter adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array2<f64>> = params.blocks().iter().map(|b| Array2::zeros(b.dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .blocks_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

/// Gradient of the mean batch objective with respect to every block.
pub fn batch_gradients(
    params: &ModelParams,
    global: &GlobalIndex,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let tape = Tape::new();
    let pv = ParamVars::new(&tape, params, true);
    let (total, breakdown, _) = batch_objective(&pv, params, Some(global), None, batch, cfg)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss (ce {}, cr {})",
            breakdown.ce, breakdown.cr
        )));
    }
    let mut grads = tape.backward(total)?;
    let g: Vec<Array2<f64>> = pv.vars().iter().map(|&v| grads.take(v)).collect();
    if let Some(k) = g.iter().position(|a| a.iter().any(|x| !x.is_finite())) {
        return Err(Error::Numerical(format!(
            "non-finite gradient in `{}`",
            params.names()[k]
        )));
    }
    Ok((breakdown, g))
}

/// One optimiser update on a batch.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut Adam,
    global: &GlobalIndex,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradients(params, global, batch, cfg)?;
    adam.step(params, &grads, cfg.learning_rate);
    Ok(loss)
}

/// Loss and hit rate at 10 of `params` on fixed examples, without updates.
pub fn validation_loss(
    params: &ModelParams,
    global: &GlobalIndex,
    examples: &[Example<'_>],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, f64)> {
    if examples.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let repr = {
        let tape = Tape::new();
        let pv = ParamVars::new(&tape, params, false);
        let r = item_representations(&pv, params.config(), global)?;
        (*r.array()).clone()
    };
    let parts: Vec<Result<(f64, f64, usize)>> = examples
        .par_chunks(VALID_CHUNK)
        .map(|chunk| {
            let tape = Tape::new();
            let pv = ParamVars::new(&tape, params, false);
            let (_, loss, scores) = batch_objective(&pv, params, None, Some(&repr), chunk, cfg)?;
            let scores = scores.array();
            let hits = chunk
                .iter()
                .enumerate()
                .filter(|(b, e)| rank_of(scores.row(*b).as_slice().expect("row"), e.target) <= 10)
                .count();
            let n = chunk.len() as f64;
            Ok((loss.ce * n, loss.cr * n, hits))
        })
        .collect();
    let (mut ce, mut cr, mut hits) = (0.0, 0.0, 0usize);
    for p in parts {
        let (a, b, h) = p?;
        ce += a;
        cr += b;
        hits += h;
    }
    let n = examples.len() as f64;
    let loss = LossBreakdown::new(ce / n, cr / n, cfg.omega);
    if !loss.total.is_finite() {
        return Err(Error::Numerical("non-finite validation loss".into()));
    }
    Ok((loss, hits as f64 / n))
}

/// What the early-stopping rule decided after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` consecutive epochs without a strictly lower
/// validation loss than the best so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad: usize,
}

impl EarlyStopping {
    /// `baseline` is the validation loss before training (epoch 0).
    pub fn new(patience: usize, baseline: f64) -> Self {
        Self {
            patience,
            best: baseline,
            best_epoch: 0,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Decision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad = 0;
            Decision::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                Decision::Stop
            } else {
                Decision::Continue
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Drives `epoch_fn(epoch)` for epochs `1..=max_epochs`; it returns that
/// epoch's validation loss, and `on_improve` runs whenever it is the best yet.
pub fn run_epochs(
    max_epochs: usize,
    patience: usize,
    baseline: f64,
    mut epoch_fn: impl FnMut(usize) -> Result<f64>,
    mut on_improve: impl FnMut(usize) -> Result<()>,
) -> Result<StopReport> {
    let mut stopper = EarlyStopping::new(patience, baseline);
    for epoch in 1..=max_epochs {
        let loss = epoch_fn(epoch)?;
        match stopper.observe(epoch, loss) {
            Decision::Improved => on_improve(epoch)?,
            Decision::Continue => {}
            Decision::Stop => {
                return Ok(StopReport {
                    epochs_run: epoch,
                    best_epoch: stopper.best_epoch(),
                    stopped_early: true,
                })
            }
        }
    }
    Ok(StopReport {
        epochs_run: max_epochs,
        best_epoch: stopper.best_epoch(),
        stopped_early: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub valid: LossBreakdown,
    pub valid_h10: f64,
}

pub const CURVE_CSV_HEADER: &str = "epoch,train_total,train_ce,train_cr,valid_total,valid_h10\n";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_CSV_HEADER);
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train.total, r.train.ce, r.train.cr, r.valid.total, r.valid_h10
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters with the lowest validation loss seen (possibly the
    /// initial ones).
    pub params: ModelParams,
    pub curve: Vec<CurveRow>,
    pub initial_valid: LossBreakdown,
    pub report: StopReport,
}

/// Trains on `train`, early-stopping on `valid` loss.
pub fn fit(
    params: ModelParams,
    global: &GlobalIndex,
    train: &[UserSequence],
    valid: &[UserSequence],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    fit_with(params, global, train, valid, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    mut params: ModelParams,
    global: &GlobalIndex,
    train: &[UserSequence],
    valid: &[UserSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&CurveRow),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if valid.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let n_items = params.n_items();
    let mut valid_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11d);
    let valid_examples = make_examples(valid, n_items, cfg.negatives, &mut valid_rng)?;
    let (initial_valid, _) = validation_loss(&params, global, &valid_examples, cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params);
    let mut best = params.clone();
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut stopper = EarlyStopping::new(cfg.patience, initial_valid.total);
    let mut report = StopReport {
        epochs_run: cfg.max_epochs,
        best_epoch: 0,
        stopped_early: false,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let shuffled: Vec<UserSequence> = order.iter().map(|&i| train[i].clone()).collect();
        let examples = make_examples(&shuffled, n_items, cfg.negatives, &mut rng)?;
        let (mut ce, mut cr) = (0.0, 0.0);
        for batch in examples.chunks(cfg.batch_size) {
            let l = train_step(&mut params, &mut adam, global, batch, cfg)?;
            ce += l.ce * batch.len() as f64;
            cr += l.cr * batch.len() as f64;
        }
        let n = examples.len() as f64;
        let (valid_loss, h10) = validation_loss(&params, global, &valid_examples, cfg)?;
        let row = CurveRow {
            epoch,
            train: LossBreakdown::new(ce / n, cr / n, cfg.omega),
            valid: valid_loss,
            valid_h10: h10,
        };
        on_epoch(&row);
        curve.push(row);
        match stopper.observe(epoch, valid_loss.total) {
            Decision::Improved => best = params.clone(),
            Decision::Continue => {}
            Decision::Stop => {
                report.epochs_run = epoch;
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_epoch = stopper.best_epoch();
    Ok(FitResult {
        params: best,
        curve,
        initial_valid,
        report,
    })
}
