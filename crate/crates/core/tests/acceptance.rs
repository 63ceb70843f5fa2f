//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Extra arguments filter criteria by name.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use phgr::autodiff::{grad_check_many, GradCheckReport, Tape, Tensor, Var};
use phgr::data::{split, synth_hierarchical, synthesize, Corpus, DatasetSplit, SynthConfig};
use phgr::eval::{
    evaluate, evaluate_popularity, item_counts, metrics_at_k, origin_distances, rank_of, ranking, region_analysis,
    RankingMetrics,
};
use phgr::experiment::train_and_evaluate;
use phgr::graph::{build_global_graph, UserSequence};
use phgr::model::{
    item_representations, sequence_forward, BatchPlan, GlobalIndex, Inner, Layout, ModelConfig, ModelParams,
    ParamVars, Space, Variant,
};
use phgr::train::{fit, make_examples, objective, run_epochs, TrainConfig};
use phgr::verify::{equal_norm_inner, verify_geometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// ---------------------------------------------------------------- geometry

fn geometry_battery() -> Outcome {
    let start = Instant::now();
    let report = match verify_geometry(10_000, &[2, 8, 64], 1.0, 0.98, 7) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let took = start.elapsed();
    let errs: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{}{}={:.1e}", if c.passed() { "" } else { "!" }, c.name, c.max_error))
        .collect();
    let pass = report.checks.iter().all(|c| c.passed()) && took < Duration::from_secs(30);
    outcome(pass, format!("30000 pairs in {} (< 30s); {}", secs(took), errs.join(" ")))
}

fn non_monotone_inner() -> Outcome {
    let beta = std::f64::consts::FRAC_PI_4;
    let d = |r| equal_norm_inner(1.0, r, beta).unwrap_or(f64::NAN);
    let (a, b, c) = (d(0.05), d(0.5), d(0.98));
    outcome(b > a && b > c, format!("D(0.05)={a:.5} < D(0.5)={b:.5} > D(0.98)={c:.5}"))
}

// --------------------------------------------------------------- gradients

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    let v: Vec<f64> = (0..r * c).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(r, c, v).unwrap()
}

/// `Σ R ⊙ x` for a fixed random `R`, turning any output into a scalar.
fn project<'t>(x: Var<'t>, seed: u64) -> phgr::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(&mut rng, x.rows(), x.cols(), 1.0);
    x.mul(x.tape().constant(r))?.sum()
}

// The graph-attention bias shifts every logit of a softmax group equally, so
// its true gradient is exactly zero and the numeric side is pure round-off,
// about ε·|f|/step. A 1e-3 step keeps that under the 1e-8 floor × tolerance.
const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn primitive_checks(rng: &mut ChaCha8Rng) -> Vec<(String, GradCheckReport)> {
    let cfg = ModelConfig::new(4, 1);
    let sp = Space::new(&cfg);
    let mut out = Vec::new();
    let pts = |rng: &mut ChaCha8Rng| vec![random_tensor(rng, 3, 4, 0.4), random_tensor(rng, 3, 4, 0.4)];
    type Op = for<'t> fn(&Space, Var<'t>, Var<'t>) -> phgr::Result<Var<'t>>;
    let ops: Vec<(&str, Op)> = vec![
        ("exp0", |s, a, _| s.exp0(a)),
        ("log0", |s, a, _| s.log0(s.exp0(a)?)),
        ("mobius_add", |s, a, b| s.mobius_add(s.exp0(a)?, s.exp0(b)?)),
        ("exp_at", |s, a, b| s.exp_at(s.exp0(a)?, b)),
        ("log_at", |s, a, b| s.log_at(s.exp0(a)?, s.exp0(b)?)),
        ("distance", |s, a, b| s.distance(s.exp0(a)?, s.exp0(b)?)),
        ("inner_D", |s, a, b| s.scores(s.exp0(a)?, s.exp0(b)?, Inner::Geodesic)),
        ("inner_P", |s, a, b| s.scores(s.exp0(a)?, s.exp0(b)?, Inner::Projected)),
    ];
    for (name, op) in ops {
        let inputs = pts(rng);
        let r = grad_check_many(|_, v| project(op(&sp, v[0], v[1])?, 1), &inputs, STEP, TOL).unwrap();
        out.push((name.to_string(), r));
    }
    out
}

fn toy_model(cfg: &ModelConfig, seed: u64) -> (ModelParams, GlobalIndex, Vec<UserSequence>) {
    let seqs = vec![
        UserSequence::new(0, vec![0, 1, 2, 1]),
        UserSequence::new(1, vec![2, 3, 4]),
        UserSequence::new(2, vec![4, 0, 0, 3]),
    ];
    let g = build_global_graph(&seqs, 3, 5).unwrap();
    let p = ModelParams::init(3, 5, cfg, seed).unwrap();
    let gi = GlobalIndex::new(&g, &p).unwrap();
    (p, gi, seqs)
}

/// Checks `f` against the listed parameter blocks; the rest stay constant.
fn check_blocks(
    params: &ModelParams,
    blocks: &[usize],
    f: &dyn for<'t> Fn(&ParamVars<'t>) -> phgr::Result<Var<'t>>,
) -> GradCheckReport {
    let inputs: Vec<Tensor> = blocks.iter().map(|&k| Tensor::from_array(params.blocks()[k].clone())).collect();
    grad_check_many(
        |tape: &Tape, vars| {
            let mut all: Vec<Var<'_>> = params.blocks().iter().map(|b| tape.constant_array(b.clone())).collect();
            for (&k, &v) in blocks.iter().zip(vars) {
                all[k] = v;
            }
            f(&ParamVars::from_vars(all))
        },
        &inputs,
        STEP,
        TOL,
    )
    .unwrap()
}

fn layer_checks() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    let mut base = ModelConfig::new(4, 1);
    base.init_std = 0.3;
    let lay = Layout::new(1);
    let inputs: Vec<&[usize]> = vec![&[0, 1, 2, 1], &[2, 3], &[4, 0, 0]];

    let (p, gi, _) = toy_model(&base, 1);
    let r = check_blocks(&p, &[Layout::USERS, Layout::ITEMS, lay.global_w(0), lay.global_b(0)], &|pv| {
        project(item_representations(pv, &base, &gi)?, 2)
    });
    out.push(("global layer".to_string(), r));

    let user_out = |cfg: ModelConfig, blocks: Vec<usize>, seed: u64| {
        let (p, gi, _) = toy_model(&cfg, seed);
        let plan = BatchPlan::new(&inputs, 5).unwrap();
        check_blocks(&p, &blocks, &|pv| {
            let repr = item_representations(pv, &cfg, &gi)?;
            project(sequence_forward(pv, &cfg, repr, &plan, 5)?.users, 3)
        })
    };
    let mut local = base.clone();
    local.ablation.no_long = true;
    local.ablation.no_short = true;
    out.push((
        "local layer".to_string(),
        user_out(local, vec![Layout::ITEMS, lay.local_w(0), lay.local_b(0)], 2),
    ));
    let mut long = base.clone();
    long.ablation.no_short = true;
    out.push((
        "long attention".to_string(),
        user_out(long, vec![lay.w_query(), lay.w_key(), lay.w_value()], 3),
    ));
    let mut short = base.clone();
    short.ablation.no_long = true;
    out.push((
        "short attention".to_string(),
        user_out(short, vec![lay.w_last(), lay.w_item(), lay.q()], 4),
    ));
    out
}

fn loss_checks() -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for (variant, inner) in [
        (Variant::Poincare, Inner::Geodesic),
        (Variant::Poincare, Inner::Projected),
        (Variant::Euclidean, Inner::Geodesic),
    ] {
        let mut cfg = ModelConfig::new(4, 1);
        cfg.variant = variant;
        cfg.inner = inner;
        cfg.init_std = 0.3;
        let (p, gi, seqs) = toy_model(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = make_examples(&seqs, 5, 1, &mut rng).unwrap();
        let t = TrainConfig {
            omega: 0.5,
            margin: 0.3,
            ..TrainConfig::default()
        };
        let all: Vec<usize> = (0..p.blocks().len()).collect();
        let inputs: Vec<Tensor> = all.iter().map(|&k| Tensor::from_array(p.blocks()[k].clone())).collect();
        let r = grad_check_many(
            |_, vars| objective(&ParamVars::from_vars(vars.to_vec()), &p, &gi, &ex, &t),
            &inputs,
            STEP,
            TOL,
        )
        .unwrap();
        out.push((format!("total loss {}", cfg.label()), r));
    }
    out
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut all = primitive_checks(&mut rng);
    all.extend(layer_checks());
    all.extend(loss_checks());
    let took = start.elapsed();
    let worst = all.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = all
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, r)| format!("{n} ({:.2e}, worst {:?})", r.max_rel_error, r.worst))
        .collect();
    let pass = failed.is_empty() && took < Duration::from_secs(120);
    let mut detail = format!(
        "{} checks, worst relative error {worst:.2e} (tol 1e-4), {} (< 120s)",
        all.len(),
        secs(took)
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    outcome(pass, detail)
}

// ----------------------------------------------------------------- metrics

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let m = rng.random_range(20..200);
        let scores: Vec<f64> = (0..m).map(|_| (rng.random_range(0..30) as f64) * 0.1).collect();
        let target = rng.random_range(0..m);
        let ranked = ranking(&scores);
        let pos = ranked.iter().position(|&i| i == target).unwrap();
        if rank_of(&scores, target) != pos + 1 {
            mismatches += 1;
        }
        for k in [1, 5, 10, 20] {
            let c = metrics_at_k(&ranked, target, k).unwrap();
            let (h, n, mp) = if pos < k {
                (1.0, 1.0 / ((pos + 2) as f64).log2(), 1.0 / (pos + 1) as f64)
            } else {
                (0.0, 0.0, 0.0)
            };
            if c.hit.to_bits() != f64::to_bits(h) || c.ndcg.to_bits() != n.to_bits() || c.map.to_bits() != mp.to_bits() {
                mismatches += 1;
            }
        }
    }
    let mut ranks = Vec::new();
    for _ in 0..10_000 {
        let scores: Vec<f64> = (0..100).map(|_| rng.random()).collect();
        ranks.push(rank_of(&scores, rng.random_range(0..100)));
    }
    let h10 = RankingMetrics::from_ranks(&ranks, &[10]).unwrap().hit[0];
    outcome(
        mismatches == 0 && (h10 - 0.10).abs() <= 0.01,
        format!("10000 tied-score rankings, {mismatches} mismatches vs scan; random-score H@10 = {h10:.4} (0.10 ± 0.01)"),
    )
}

// ---------------------------------------------------------------- training

fn synthetic_split(seqs: Vec<UserSequence>, n_users: usize, n_items: usize, seed: u64) -> DatasetSplit {
    split(&Corpus::from_indexed(seqs, n_users, n_items), seed).unwrap()
}

fn overfit() -> Outcome {
    let start = Instant::now();
    let seqs = synthesize(&SynthConfig::separable(50, 20, 2, 4, 8, 0)).unwrap();
    let s = synthetic_split(seqs, 50, 20, 0);
    let cfg = ModelConfig::new(16, 1);
    let t = TrainConfig {
        max_epochs: 200,
        ..TrainConfig::default()
    };
    let params = ModelParams::init(50, 20, &cfg, 0).unwrap();
    let gi = GlobalIndex::new(&s.global_graph().unwrap(), &params).unwrap();
    let r = match fit(params, &gi, &s.train, &s.valid, &t) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("error: {e}")),
    };
    let h10 = evaluate(&r.params, &gi, &s.valid, &[10]).unwrap().hit[0];
    let took = start.elapsed();
    outcome(
        h10 >= 0.9 && took < Duration::from_secs(300),
        format!(
            "validation H@10 = {h10:.3} (>= 0.90) at best epoch {} of {} run, {} (< 300s)",
            r.report.best_epoch,
            r.report.epochs_run,
            secs(took)
        ),
    )
}

struct SeedRun {
    seed: u64,
    full: f64,
    no_ls: f64,
    popularity: f64,
    regions: [f64; 4],
    monotone: bool,
}

fn desk_seed(seed: u64) -> phgr::Result<SeedRun> {
    let (n, m) = (2000, 500);
    let seqs = synth_hierarchical(n, m, 2.0, (5, 15), seed)?;
    let s = synthetic_split(seqs, n, m, seed);
    let t = TrainConfig {
        max_epochs: 40,
        seed,
        ..TrainConfig::default()
    };
    let full_cfg = ModelConfig::new(16, 1);
    let mut no_ls = full_cfg.clone();
    no_ls.ablation.no_long = true;
    no_ls.ablation.no_short = true;
    let full = train_and_evaluate(&s, &full_cfg, &t, &[10], |_| {})?;
    let ablated = train_and_evaluate(&s, &no_ls, &t, &[10], |_| {})?;
    let popularity = evaluate_popularity(&s.train, &s.test, m, &[10])?.hit[0];
    let regions = region_analysis(&origin_distances(&full.fit.params), &item_counts(&s.train, m), None)?;
    Ok(SeedRun {
        seed,
        full: full.test.hit[0],
        no_ls: ablated.test.hit[0],
        popularity,
        regions: regions.mean_interactions,
        monotone: regions.is_nonincreasing(),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn desk_scale() -> Vec<(String, Outcome)> {
    let start = Instant::now();
    let mut runs = Vec::new();
    for seed in 0..5 {
        match desk_seed(seed) {
            Ok(r) => {
                println!(
                    "  seed {}: PHGR H@10 {:.3}  w/o-L&S {:.3}  popularity {:.3}  region means {:.1?}",
                    r.seed, r.full, r.no_ls, r.popularity, r.regions
                );
                runs.push(r);
            }
            Err(e) => {
                let o = || outcome(false, format!("seed {seed}: {e}"));
                return vec![("desk-scale ranking".into(), o()), ("region trend".into(), o())];
            }
        }
    }
    let took = start.elapsed();
    let full = median(runs.iter().map(|r| r.full).collect());
    let no_ls = median(runs.iter().map(|r| r.no_ls).collect());
    let pop = median(runs.iter().map(|r| r.popularity).collect());
    let ranking = outcome(
        full >= no_ls && full >= 1.5 * pop && took < Duration::from_secs(1800),
        format!(
            "median test H@10: PHGR {full:.3} vs w/o-L&S {no_ls:.3} and 1.5 x popularity {:.3}; 10 trainings in {} (< 1800s)",
            1.5 * pop,
            secs(took)
        ),
    );
    let mono = runs.iter().filter(|r| r.monotone).count();
    let regions = outcome(
        mono >= 4,
        format!("mean interactions nonincreasing from region 1 to 4 in {mono}/5 seeds (>= 4)"),
    );
    vec![("desk-scale ranking".into(), ranking), ("region trend".into(), regions)]
}

fn early_stopping() -> Outcome {
    let mut seen = 0;
    let report = run_epochs(
        1000,
        10,
        1.0,
        |e| {
            seen = e;
            Ok(1.0 + e as f64)
        },
        |_| Ok(()),
    )
    .unwrap();
    outcome(
        report.epochs_run == 10 && seen == 10 && report.stopped_early && report.best_epoch == 0,
        format!(
            "strictly worsening validation loss: stopped after {} epochs, best epoch {}",
            report.epochs_run, report.best_epoch
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let seqs = synth_hierarchical(120, 40, 2.0, (4, 8), 9).unwrap();
    let s = synthetic_split(seqs, 120, 40, 9);
    let t = TrainConfig {
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let mut cfg = ModelConfig::new(8, 2);
    cfg.c = 0.7;
    let run = train_and_evaluate(&s, &cfg, &t, &[10, 20], |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run.fit.params.save(dir.path()).unwrap();
    let loaded = ModelParams::load(dir.path()).unwrap();
    let gi = GlobalIndex::new(&s.global_graph().unwrap(), &loaded).unwrap();
    let again = evaluate(&loaded, &gi, &s.test, &[10, 20]).unwrap();
    let bits = |m: &RankingMetrics| -> Vec<u64> { m.hit.iter().chain(&m.ndcg).chain(&m.map).map(|x| x.to_bits()).collect() };
    let same = bits(&again) == bits(&run.test) && loaded == run.fit.params;
    outcome(
        same,
        format!("params and H/N/M@10,20 after save/load bit-identical: {same}"),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let run = |name: &str, f: &dyn Fn() -> Outcome, results: &mut Vec<(String, Outcome)>| {
        if wanted(name) {
            let o = f();
            println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((name.to_string(), o));
        }
    };
    run("geometry battery", &geometry_battery, &mut results);
    run("non-monotone geodesic inner product", &non_monotone_inner, &mut results);
    run("gradient checks", &gradients, &mut results);
    run("metric oracle", &metric_oracle, &mut results);
    run("overfit", &overfit, &mut results);
    run("early stopping", &early_stopping, &mut results);
    run("checkpoint round trip", &checkpoint_round_trip, &mut results);
    if wanted("desk-scale ranking") || wanted("region trend") {
        for (name, o) in desk_scale() {
            println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((name, o));
        }
    }
    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
