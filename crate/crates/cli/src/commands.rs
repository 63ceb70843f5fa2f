use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use phgr::config::RunConfig;
use phgr::data::{build_sequences, read_interactions, split, synth_hierarchical, Corpus, DatasetSplit};
use phgr::eval::{
    attention_csv, evaluate, evaluate_popularity, item_counts, origin_distances, region_analysis, split_example,
    AttentionRecord, METRICS_CSV_HEADER,
};
use phgr::experiment::{ablation_configs, comparison_table, configs_at, grid_csv, grid_points, select_best, train_and_evaluate};
use phgr::model::{forward, GlobalIndex, ModelParams};
use phgr::train::{curve_csv, fit_with, CurveRow};
use phgr::verify::verify_geometry;

use crate::args::{AttentionArgs, CheckpointArgs, Common, EvaluateArgs, GridArgs, PrepareArgs, VerifyArgs};
use crate::{Failure, Usage};

pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Defaults, then the config file, then `PHGR_*` variables, then flags.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path).map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
    }
    cfg.apply_env(std::env::vars()).map_err(|e| Usage(e.to_string()))?;
    for (k, v) in common.overrides() {
        cfg.set(k, &v).map_err(|e| Usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    Ok(cfg.finish().map_err(|e| Usage(e.to_string()))?)
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    Ok(cfg.data.as_deref().ok_or_else(|| Usage("--data is required".into()))?)
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    let out = cfg.out.as_deref().ok_or_else(|| Usage("--out is required".into()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let dir = data_dir(cfg)?;
    Ok(DatasetSplit::load(dir)?)
}

fn load_checkpoint(path: &Path, split: &DatasetSplit) -> Result<(ModelParams, GlobalIndex)> {
    let params = ModelParams::load(path)?;
    if params.n_users() != split.n_users() || params.n_items() != split.n_items() {
        return Err(phgr::Error::Data(format!(
            "checkpoint has {} users / {} items but the dataset has {} / {}",
            params.n_users(),
            params.n_items(),
            split.n_users(),
            split.n_items()
        ))
        .into());
    }
    let global = GlobalIndex::new(&split.global_graph()?, &params)?;
    Ok((params, global))
}

fn progress(label: &str) -> impl FnMut(&CurveRow) + '_ {
    move |r| {
        eprintln!(
            "{label} epoch {:>3}  train {:.5}  valid {:.5}  valid H@10 {:.4}",
            r.epoch, r.train.total, r.valid.total, r.valid_h10
        )
    }
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let out = out_dir(&cfg)?;
    let corpus = if a.synthetic {
        let seqs = synth_hierarchical(a.users, a.items, a.exponent, (a.len_min, a.len_max), cfg.train.seed)
            .map_err(|e| Usage(e.to_string()))?;
        Corpus::from_indexed(seqs, a.users, a.items)
    } else {
        let path = a.input.as_deref().ok_or_else(|| Usage("--input or --synthetic is required".into()))?;
        let parsed = read_interactions(path, cfg.max_malformed)?;
        for m in &parsed.malformed {
            eprintln!("skipped line {}: {}", m.line, m.reason);
        }
        build_sequences(&parsed.records, cfg.min_len)
    };
    let s = split(&corpus, cfg.train.seed)?;
    s.save(out, &corpus)?;
    println!(
        "{} sequences, {} users, {} items: train {} / valid {} / test {}",
        corpus.sequences.len(),
        s.n_users(),
        s.n_items(),
        s.train.len(),
        s.valid.len(),
        s.test.len()
    );
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let s = load_split(&cfg)?;
    let out = out_dir(&cfg)?;
    let params = ModelParams::init(s.n_users(), s.n_items(), &cfg.model, cfg.train.seed)?;
    let global = GlobalIndex::new(&s.global_graph()?, &params)?;
    let label = cfg.model.label();
    let fit = fit_with(params, &global, &s.train, &s.valid, &cfg.train, progress(&label))?;
    fit.params.save(&out.join(CHECKPOINT_DIR))?;
    write(out.join("curve.csv"), &curve_csv(&fit.curve))?;
    write(out.join("config.cfg"), &cfg.to_text())?;
    println!(
        "{label}: {} epochs, best epoch {}{}; checkpoint in {}",
        fit.report.epochs_run,
        fit.report.best_epoch,
        if fit.report.stopped_early { " (early stop)" } else { "" },
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = load_split(&cfg)?;
    let (params, global) = load_checkpoint(&a.checkpoint, &s)?;
    let part = match a.split.as_str() {
        "train" => &s.train,
        "valid" => &s.valid,
        _ => &s.test,
    };
    let name = dataset_name(data_dir(&cfg)?);
    let label = params.config().label();
    let m = evaluate(&params, &global, part, &cfg.ks)?;
    let pop = evaluate_popularity(&s.train, part, s.n_items(), &cfg.ks)?;
    print!("{}", m.table(&name, &label));
    print!("{}", pop.table(&name, "popularity").lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
    if cfg.out.is_some() {
        let out = out_dir(&cfg)?;
        let csv = format!("{METRICS_CSV_HEADER}{}{}", m.csv_rows(&name, &label), pop.csv_rows(&name, "popularity"));
        write(out.join("metrics.csv"), &csv)?;
    }
    Ok(())
}

pub fn ablate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let s = load_split(&cfg)?;
    let out = out_dir(&cfg)?;
    let name = dataset_name(data_dir(&cfg)?);
    let mut runs = Vec::new();
    for m in ablation_configs(&cfg.model) {
        let label = m.label();
        eprintln!("== {label}");
        runs.push(train_and_evaluate(&s, &m, &cfg.train, &cfg.ks, progress(&label))?);
    }
    let table = comparison_table(&name, &runs);
    let mut csv = String::from(METRICS_CSV_HEADER);
    for r in &runs {
        csv.push_str(&r.test.csv_rows(&name, &r.label));
    }
    write(out.join("ablation.csv"), &csv)?;
    write(out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    if a.dims.is_empty() || a.samples == 0 || !(a.max_norm > 0.0 && a.max_norm < 1.0) {
        return Err(Usage("need at least one dimension, one sample and 0 < --max-norm < 1".into()).into());
    }
    let report = verify_geometry(a.samples, &a.dims, a.c, a.max_norm, cfg.train.seed)
        .map_err(|e| Usage(e.to_string()))?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::numerical("geometry property violated").into())
    }
}

pub fn analyze_regions(a: &CheckpointArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = load_split(&cfg)?;
    let (params, _) = load_checkpoint(&a.checkpoint, &s)?;
    let report = region_analysis(&origin_distances(&params), &item_counts(&s.train, s.n_items()), None)?;
    let csv = report.csv();
    print!("{csv}");
    if cfg.out.is_some() {
        write(out_dir(&cfg)?.join("regions.csv"), &csv)?;
    }
    Ok(())
}

pub fn export_attention(a: &AttentionArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = load_split(&cfg)?;
    let (params, global) = load_checkpoint(&a.checkpoint, &s)?;
    let mut found = Vec::new();
    for id in &a.users {
        let seq = s
            .users
            .get(id)
            .and_then(|u| s.parts().into_iter().flatten().find(|q| q.user == u))
            .ok_or_else(|| phgr::Error::Lookup(format!("no sequence for user {id:?}")))?;
        let (input, _) = split_example(seq)?;
        found.push((id.clone(), input, forward(&params, &global, input)?));
    }
    let records: Vec<AttentionRecord<'_>> = found
        .iter()
        .map(|(id, input, out)| AttentionRecord {
            sequence: id.clone(),
            items: input,
            output: out,
        })
        .collect();
    let csv = attention_csv(&records);
    if cfg.out.is_some() {
        write(out_dir(&cfg)?.join("attention.csv"), &csv)?;
    } else {
        print!("{csv}");
    }
    Ok(())
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let s = load_split(&cfg)?;
    let out = out_dir(&cfg)?;
    let points = grid_points(&a.dims, &a.depths, &a.omegas);
    if points.is_empty() {
        return Err(Usage("empty grid".into()).into());
    }
    let mut runs = Vec::new();
    for p in &points {
        let (m, t) = configs_at(&cfg.model, &cfg.train, p);
        m.validate().map_err(|e| Usage(e.to_string()))?;
        let label = format!("d={} L={} omega={}", p.dim, p.layers, p.omega);
        eprintln!("== {label}");
        runs.push(train_and_evaluate(&s, &m, &t, &cfg.ks, progress(&label))?);
    }
    write(out.join("grid.csv"), &grid_csv(&points, &runs))?;
    if let Some(b) = select_best(&runs) {
        let p = &points[b];
        println!("best by validation loss: d={} L={} omega={}", p.dim, p.layers, p.omega);
        print!("{}", runs[b].test.table(&dataset_name(data_dir(&cfg)?), &runs[b].label));
    }
    Ok(())
}
