//! One function per subcommand. Each resolves its configuration, does its
//! work through the library, and writes outputs atomically.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confmpnn::analysis::{attention_similarity, DESCRIPTOR};
use confmpnn::config::RunConfig;
use confmpnn::data::{ingest as ingest_file, scaffold_split, to_jsonl, MoleculeRecord, Split, SplitAssignment};
use confmpnn::io::{read_to_string, to_json_lines, write_atomic};
use confmpnn::metrics::{uncertainty, MetricsReport, ROCE_FPRS};
use confmpnn::network::{Network, Prepared};
use confmpnn::pool::PoolKind;
use confmpnn::synthetic::{planted_set, random_molecules, separable_set};
use confmpnn::train::{
    evaluate, export_fingerprints, predict_all, prepare_all, prepare_with_dump, train as train_network, train_transfer,
    FingerprintDump, TrainOutcome,
};
use confmpnn::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::RunArgs;

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Builds the run configuration. `beside` names a checkpoint whose
/// directory may hold the `config.toml` of the run that produced it.
fn resolve(run: &RunArgs, beside: Option<&Path>) -> Result<RunConfig> {
    let saved = beside
        .and_then(Path::parent)
        .map(|d| d.join("config.toml"))
        .filter(|p| p.is_file());
    let base = match (&run.config, saved) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(path)) => {
            let mut c = RunConfig::load(&path)?;
            // outputs of a derived command never default into the training directory
            c.out = None;
            c
        }
        (None, None) => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&run.set)?;
    if let Some(d) = &run.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &run.out {
        cfg.out = Some(o.clone());
    }
    if let Some(j) = run.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = run.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = &run.arch {
        cfg.model.arch = a.parse()?;
    }
    if let Some(p) = &run.pool {
        cfg.pool.kind = p.parse()?;
    }
    cfg.validate()?;
    if cfg.jobs > 0 {
        // a second call in one process fails harmlessly and keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    Ok(cfg)
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| invalid("no dataset given (--data or `data` key)"))
}

/// Creates the output directory and saves the resolved configuration in it.
fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| invalid("no output directory given (--out or `out` key)"))?;
    create_dir(&out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(out)
}

fn load_records(cfg: &RunConfig) -> Result<Vec<MoleculeRecord>> {
    Ok(ingest_file(data_path(cfg)?, &cfg.filter)?.records)
}

fn load_split(records: &[MoleculeRecord], cfg: &RunConfig, file: Option<&Path>) -> Result<SplitAssignment> {
    let split = match file {
        Some(path) => serde_json::from_str(&read_to_string(path)?)?,
        None => scaffold_split(records, cfg.split.fractions(), cfg.train.seed)?,
    };
    if let Some(r) = records.iter().find(|r| split.get(&r.id).is_none()) {
        return Err(invalid(format!("species {} has no split assignment", r.id)));
    }
    Ok(split)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn print_report(r: &MetricsReport) {
    let spread = r.uncertainty.as_deref();
    let pm = |v: f64, s: Option<f64>| match s {
        Some(s) => format!("{v:.4} ± {s:.4}"),
        None => format!("{v:.4}"),
    };
    println!("ROC-AUC     {}", pm(r.roc_auc, spread.map(|u| u.roc_auc)));
    println!("PRC-AUC     {}", pm(r.prc_auc, spread.map(|u| u.prc_auc)));
    for f in ROCE_FPRS {
        let v = r.roce_at(f).unwrap_or(f64::NAN);
        let s = spread.and_then(|u| u.roce_at(f));
        println!("ROCE@{:<6} {}", format!("{}%", f * 100.0), pm(v, s));
    }
}

fn has_both_classes(mols: &[Prepared]) -> bool {
    mols.iter().any(Prepared::is_hit) && !mols.iter().all(Prepared::is_hit)
}

/// Writes `summary.json` and, when the test split has both classes,
/// `metrics.json` for the selected checkpoint.
fn finish_training(
    cfg: &RunConfig,
    out: &Path,
    outcome: &TrainOutcome,
    test: &[Prepared],
) -> Result<serde_json::Value> {
    let best = outcome.best(cfg.train.selection_metric);
    let mut summary: serde_json::Value = json!({
        "model": best.network.spec.display_name(),
        "epochs": outcome.log.len(),
        "stop": outcome.stop,
        "selection_metric": cfg.train.selection_metric,
        "best_epoch": best.epoch,
        "best_score": best.score,
        "best_roc": { "epoch": outcome.best_roc.epoch, "score": outcome.best_roc.score },
        "best_prc": { "epoch": outcome.best_prc.epoch, "score": outcome.best_prc.score },
    });
    println!(
        "stopped after {} epochs ({}); best validation {} {:.4} at epoch {}",
        outcome.log.len(),
        summary["stop"].as_str().unwrap_or("?"),
        summary["selection_metric"].as_str().unwrap_or("?"),
        best.score,
        best.epoch
    );
    if has_both_classes(test) {
        let report = evaluate(&best.network, test)?;
        println!("test split ({} species):", test.len());
        print_report(&report);
        write_json(&out.join("metrics.json"), &report)?;
        summary["test"] = serde_json::to_value(&report)?;
    } else {
        println!("test split lacks one class; no test metrics");
    }
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn split_refs<'a>(records: &'a [MoleculeRecord], split: &SplitAssignment) -> [Vec<&'a MoleculeRecord>; 3] {
    Split::ALL.map(|s| split.select(records, s))
}

fn run_training(cfg: &RunConfig, split_file: Option<&Path>) -> Result<serde_json::Value> {
    let out = out_dir(cfg)?;
    let records = load_records(cfg)?;
    let split = load_split(&records, cfg, split_file)?;
    write_json(&out.join("split.json"), &split)?;
    let [tr, va, te] = split_refs(&records, &split);
    let mut spec = cfg.network_spec();
    if spec.model.whim {
        spec.model.whim = false;
        spec.fit_whim(&tr)?;
    }
    let net = Network::new(spec, cfg.train.seed)?;
    println!("model: {}", net.spec.display_name());
    println!(
        "species: {} train, {} validation, {} test",
        tr.len(),
        va.len(),
        te.len()
    );
    let train_set = prepare_all(&net, &tr)?;
    let val_set = prepare_all(&net, &va)?;
    let test_set = prepare_all(&net, &te)?;
    let outcome = train_network(net, &train_set, &val_set, &cfg.train, Some(&out))?;
    finish_training(cfg, &out, &outcome, &test_set)
}

pub fn ingest(run: &RunArgs, max_atoms: Option<usize>, max_confs: Option<usize>, cutoff: Option<f64>) -> Result<()> {
    let mut cfg = resolve(run, None)?;
    if let Some(v) = max_atoms {
        cfg.filter.max_atoms = v;
    }
    if let Some(v) = max_confs {
        cfg.filter.max_confs = v;
    }
    if let Some(v) = cutoff {
        cfg.filter.cutoff = v;
    }
    let report = ingest_file(data_path(&cfg)?, &cfg.filter)?;
    let out = out_dir(&cfg)?;
    write_atomic(&out.join("dataset.jsonl"), to_jsonl(&report.records)?.as_bytes())?;
    write_atomic(
        &out.join("rejections.jsonl"),
        to_json_lines(&report.rejections)?.as_bytes(),
    )?;
    let mut by_rule: BTreeMap<String, usize> = BTreeMap::new();
    for r in &report.rejections {
        *by_rule
            .entry(serde_json::to_value(r.rule)?.as_str().unwrap_or("?").to_string())
            .or_default() += 1;
    }
    println!(
        "kept {} species, rejected {}",
        report.records.len(),
        report.rejections.len()
    );
    for (rule, n) in by_rule {
        println!("  {rule}: {n}");
    }
    Ok(())
}

pub fn split(run: &RunArgs) -> Result<()> {
    let cfg = resolve(run, None)?;
    let records = load_records(&cfg)?;
    let split = scaffold_split(&records, cfg.split.fractions(), cfg.train.seed)?;
    let out = out_dir(&cfg)?;
    write_json(&out.join("split.json"), &split)?;
    for s in Split::ALL {
        let members = split.select(&records, s);
        let hits = members.iter().filter(|r| r.is_hit()).count();
        println!("{:<10} {:>6} species, {:>5} hits", s.name(), members.len(), hits);
    }
    Ok(())
}

pub fn train(run: &RunArgs, split_file: Option<&Path>) -> Result<()> {
    let cfg = resolve(run, None)?;
    run_training(&cfg, split_file).map(drop)
}

fn load_networks(paths: &[PathBuf]) -> Result<Vec<Network>> {
    paths.iter().map(|p| Network::load(p).map(|(net, _)| net)).collect()
}

pub fn eval(run: &RunArgs, checkpoints: &[PathBuf], split_name: &str, split_file: Option<&Path>) -> Result<()> {
    let cfg = resolve(run, checkpoints.first().map(PathBuf::as_path))?;
    let nets = load_networks(checkpoints)?;
    let records = load_records(&cfg)?;
    let split = load_split(&records, &cfg, split_file)?;
    let which: Split = split_name.parse()?;
    let members = split.select(&records, which);
    let reports = nets
        .iter()
        .map(|net| evaluate(net, &prepare_all(net, &members)?))
        .collect::<Result<Vec<_>>>()?;
    let report = if reports.len() == 1 {
        reports[0].clone()
    } else {
        uncertainty(&reports)?
    };
    println!("model: {}", nets[0].spec.display_name());
    println!(
        "split: {} ({} species, {} hits, {} checkpoint{})",
        which.name(),
        members.len(),
        members.iter().filter(|r| r.is_hit()).count(),
        nets.len(),
        if nets.len() == 1 { "" } else { "s" }
    );
    print_report(&report);
    if cfg.out.is_some() {
        let out = out_dir(&cfg)?;
        write_json(&out.join("metrics.json"), &report)?;
    }
    Ok(())
}

pub fn predict(run: &RunArgs, checkpoint: &Path, split_name: Option<&str>, split_file: Option<&Path>) -> Result<()> {
    let cfg = resolve(run, Some(checkpoint))?;
    let (net, _) = Network::load(checkpoint)?;
    let records = load_records(&cfg)?;
    let members: Vec<&MoleculeRecord> = match split_name {
        Some(name) => load_split(&records, &cfg, split_file)?.select(&records, name.parse()?),
        None => records.iter().collect(),
    };
    let mols = prepare_all(&net, &members)?;
    let scores = predict_all(&net, &mols)?;
    let lines = to_json_lines(mols.iter().zip(&scores).map(|(m, p)| json!({ "id": m.id, "p_hit": p })))?;
    if cfg.out.is_some() {
        let out = out_dir(&cfg)?;
        write_atomic(&out.join("predictions.jsonl"), lines.as_bytes())?;
        println!("wrote {} predictions", mols.len());
    } else {
        print!("{lines}");
    }
    Ok(())
}

pub fn export_fp(run: &RunArgs, checkpoint: &Path) -> Result<()> {
    let cfg = resolve(run, Some(checkpoint))?;
    let (net, _) = Network::load(checkpoint)?;
    let records = load_records(&cfg)?;
    let refs: Vec<&MoleculeRecord> = records.iter().collect();
    let dump = export_fingerprints(&net, &prepare_all(&net, &refs)?)?;
    let out = out_dir(&cfg)?;
    dump.save(&out.join("fingerprints.json"))?;
    println!("exported {} fingerprints of width {}", dump.len(), dump.dim);
    Ok(())
}

pub fn train_tl(run: &RunArgs, dump_path: &Path, with_mp: bool, split_file: Option<&Path>) -> Result<()> {
    let cfg = resolve(run, None)?;
    let dump = FingerprintDump::load(dump_path)?;
    let out = out_dir(&cfg)?;
    let records = load_records(&cfg)?;
    let split = load_split(&records, &cfg, split_file)?;
    write_json(&out.join("split.json"), &split)?;
    let [tr, va, te] = split_refs(&records, &split);
    println!(
        "transfer on {}-wide fingerprints{}",
        dump.dim,
        if with_mp { " + 2D message passing" } else { "" }
    );
    let outcome = train_transfer(&tr, &va, &dump, with_mp, &cfg.model, &cfg.train, Some(&out))?;
    let best = &outcome.best(cfg.train.selection_metric).network;
    let test = prepare_with_dump(best, &te, &dump)?;
    finish_training(&cfg, &out, &outcome, &test).map(drop)
}

pub fn attention_report(
    run: &RunArgs,
    checkpoint: &Path,
    split_name: &str,
    split_file: Option<&Path>,
    pairs: usize,
) -> Result<()> {
    let cfg = resolve(run, Some(checkpoint))?;
    let (net, _) = Network::load(checkpoint)?;
    let records = load_records(&cfg)?;
    let split = load_split(&records, &cfg, split_file)?;
    let members = split.select(&records, split_name.parse()?);
    let out = out_dir(&cfg)?;

    let mut rows = Vec::new();
    for r in &members {
        let mol = net.prepare(r, None)?;
        for (head, alpha) in net.attention(&mol)?.iter().enumerate() {
            let value = match net.spec.pool.kind {
                PoolKind::PairAttention => {
                    let (n, m) = alpha.dims();
                    json!((0..n)
                        .map(|i| alpha.data()[i * m..(i + 1) * m].to_vec())
                        .collect::<Vec<_>>())
                }
                _ => json!(alpha.data()),
            };
            rows.push(json!({ "id": r.id, "head": head, "alpha": value }));
        }
    }
    write_atomic(&out.join("attention.jsonl"), to_json_lines(&rows)?.as_bytes())?;

    let report = attention_similarity(&net, &members, pairs, cfg.train.seed)?;
    write_json(&out.join("similarity.json"), &report)?;
    println!("# conformer descriptor: {DESCRIPTOR}");
    println!("# model: {}", net.spec.display_name());
    println!("selection   hit/hit            hit/miss           Δ");
    for (name, s) in [("attention", &report.attention), ("random", &report.random)] {
        println!(
            "{name:<11} {:.4} ± {:.4}    {:.4} ± {:.4}    {:+.4}",
            s.hit_hit.mean, s.hit_hit.sem, s.hit_miss.mean, s.hit_miss.sem, s.delta
        );
    }
    Ok(())
}

/// Inclusive sampling ranges for [`sweep`].
pub struct SweepRanges {
    hidden: (usize, usize),
    convolutions: (usize, usize),
    dropout: (f64, f64),
    readout: (usize, usize),
}

fn range<T: std::str::FromStr + PartialOrd + Copy>(name: &str, text: &str) -> Result<(T, T)> {
    let bad = || invalid(format!("--{name} expects LO:HI, got {text:?}"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    let lo: T = lo.trim().parse().map_err(|_| bad())?;
    let hi: T = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

impl SweepRanges {
    pub fn parse(hidden: &str, convolutions: &str, dropout: &str, readout: &str) -> Result<Self> {
        Ok(SweepRanges {
            hidden: range("hidden", hidden)?,
            convolutions: range("convolutions", convolutions)?,
            dropout: range("dropout", dropout)?,
            readout: range("readout", readout)?,
        })
    }

    fn sample(&self, base: &RunConfig, rng: &mut ChaCha8Rng) -> RunConfig {
        let mut c = base.clone();
        c.model.hidden = rng.gen_range(self.hidden.0..=self.hidden.1);
        c.model.convolutions = Some(rng.gen_range(self.convolutions.0..=self.convolutions.1));
        let p = rng.gen_range(self.dropout.0..=self.dropout.1);
        let p = (p * 100.0).round() / 100.0;
        c.model.dropout_conv = p;
        c.model.dropout_readout = p;
        c.model.readout_layers = rng.gen_range(self.readout.0..=self.readout.1);
        c
    }
}

pub fn sweep(run: &RunArgs, samples: usize, ranges: &SweepRanges, dry_run: bool) -> Result<()> {
    let cfg = resolve(run, None)?;
    let out = out_dir(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut rows = Vec::new();
    for i in 0..samples {
        let mut c = ranges.sample(&cfg, &mut rng);
        c.out = Some(out.join(format!("run{i:03}")));
        c.validate()?;
        let mut row = json!({
            "run": i,
            "hidden": c.model.hidden,
            "convolutions": c.model.depth(),
            "dropout": c.model.dropout_conv,
            "readout_layers": c.model.readout_layers,
        });
        println!(
            "run{i:03}: hidden {} convolutions {} dropout {} readout layers {}",
            c.model.hidden,
            c.model.depth(),
            c.model.dropout_conv,
            c.model.readout_layers
        );
        if dry_run {
            out_dir(&c)?;
        } else {
            let summary = run_training(&c, None)?;
            row["best_epoch"] = summary["best_epoch"].clone();
            row["best_score"] = summary["best_score"].clone();
        }
        rows.push(row);
    }
    write_atomic(&out.join("sweep.jsonl"), to_json_lines(&rows)?.as_bytes())?;
    Ok(())
}

pub fn synth(kind: &str, n: usize, confs: usize, seed: u64, out: &Path) -> Result<()> {
    let records = match kind {
        "separable" => separable_set(n, confs, seed),
        "planted" => planted_set(n, confs, seed),
        "random" => random_molecules(n, 8, confs, seed),
        other => return Err(invalid(format!("unknown synthetic set {other:?}"))),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(out, to_jsonl(&records)?.as_bytes())?;
    println!("wrote {} species to {}", records.len(), out.display());
    Ok(())
}
