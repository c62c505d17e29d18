use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use confmpnn::config::{RunConfig, KEYS};
use confmpnn::data::MoleculeRecord;
use tempfile::TempDir;

fn confmpnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confmpnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "failed: {}\n{}", stdout(&o), stderr(&o));
    o
}

fn separable(dir: &Path) {
    ok(confmpnn(
        dir,
        &[
            "synth",
            "--kind",
            "separable",
            "--n",
            "32",
            "--confs",
            "3",
            "--seed",
            "5",
            "--out",
            "sep.jsonl",
        ],
    ));
}

const SMALL: [&str; 6] = [
    "--set",
    "model.hidden=12",
    "--set",
    "train.max_epochs=15",
    "--set",
    "train.seed=3",
];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "sep.jsonl", "--out", out];
    args.extend(SMALL);
    args.extend(extra);
    ok(confmpnn(dir, &args))
}

#[test]
fn ingest_writes_canonical_data_and_report() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    let o = ok(confmpnn(
        tmp.path(),
        &["ingest", "--data", "sep.jsonl", "--out", "ing", "--max-confs", "1"],
    ));
    assert!(stdout(&o).contains("kept 32 species"));
    let text = fs::read_to_string(tmp.path().join("ing/dataset.jsonl")).unwrap();
    for line in text.lines() {
        let r: MoleculeRecord = serde_json::from_str(line).unwrap();
        assert_eq!(r.conformers.len(), 1);
        assert_eq!(r.conformers[0].weight, 1.0);
    }
    assert!(tmp.path().join("ing/rejections.jsonl").exists());
    let cfg = RunConfig::load(&tmp.path().join("ing/config.toml")).unwrap();
    assert_eq!(cfg.filter.max_confs, 1);
    assert_eq!(cfg.filter.max_atoms, 100);
    assert_eq!(cfg.filter.cutoff, 5.0);
}

#[test]
fn ingest_rejections_are_reported_per_rule() {
    let tmp = TempDir::new().unwrap();
    ok(confmpnn(
        tmp.path(),
        &[
            "synth", "--kind", "random", "--n", "40", "--confs", "2", "--seed", "1", "--out", "r.jsonl",
        ],
    ));
    let o = ok(confmpnn(
        tmp.path(),
        &["ingest", "--data", "r.jsonl", "--out", "ing", "--max-atoms", "5"],
    ));
    let rejections = fs::read_to_string(tmp.path().join("ing/rejections.jsonl")).unwrap();
    assert!(rejections.lines().count() > 0);
    for line in rejections.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["rule"], "max_atoms");
        assert!(v["id"].is_string());
    }
    assert!(stdout(&o).contains("max_atoms:"));
}

#[test]
fn ingest_errors_map_to_exit_codes() {
    let tmp = TempDir::new().unwrap();
    let missing = confmpnn(tmp.path(), &["ingest", "--data", "nope.jsonl", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("nope.jsonl"));

    separable(tmp.path());
    let mut text = fs::read_to_string(tmp.path().join("sep.jsonl")).unwrap();
    text.push_str("{\"id\": \"broken\"\n");
    fs::write(tmp.path().join("bad.jsonl"), text).unwrap();
    let bad = confmpnn(tmp.path(), &["ingest", "--data", "bad.jsonl", "--out", "x"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("line 33"), "{}", stderr(&bad));

    let empty = confmpnn(
        tmp.path(),
        &["ingest", "--data", "sep.jsonl", "--out", "x", "--max-atoms", "2"],
    );
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(confmpnn(tmp.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(confmpnn(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    separable(tmp.path());
    let unknown = confmpnn(
        tmp.path(),
        &["train", "--data", "sep.jsonl", "--out", "r", "--set", "model.hiden=3"],
    );
    assert_eq!(unknown.status.code(), Some(1));
    let matrix = confmpnn(
        tmp.path(),
        &[
            "train",
            "--data",
            "sep.jsonl",
            "--out",
            "r",
            "--arch",
            "chemprop2d",
            "--pool",
            "avg_nbrs",
        ],
    );
    assert_eq!(matrix.status.code(), Some(1));
    assert!(stderr(&matrix).contains("avg_nbrs"));
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn help_lists_every_key_with_default() {
    let tmp = TempDir::new().unwrap();
    for args in [&["--help"][..], &["train", "--help"][..]] {
        let o = ok(confmpnn(tmp.path(), args));
        let text = stdout(&o);
        for (key, default, _) in KEYS {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(key))
                .unwrap_or_else(|| panic!("{key} missing"));
            assert!(line.contains(&format!("default {default}")), "{line}");
        }
    }
}

#[test]
fn train_names_the_configuration_and_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    let o = train_small(tmp.path(), "run", &["--arch", "cp3d_ndu", "--pool", "single_conf"]);
    assert_eq!(stdout(&o).lines().next(), Some("model: CND (1-C)"));
    for f in [
        "best.ckpt",
        "best_roc.ckpt",
        "best_prc.ckpt",
        "last.ckpt",
        "log.csv",
        "config.toml",
        "split.json",
        "summary.json",
    ] {
        assert!(tmp.path().join("run").join(f).exists(), "{f} missing");
    }
    let cfg = RunConfig::load(&tmp.path().join("run/config.toml")).unwrap();
    assert_eq!(cfg.model.hidden, 12);
    assert_eq!(cfg.train.max_epochs, 15);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["model"], "CND (1-C)");
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    fs::write(
        tmp.path().join("c.toml"),
        "[model]\nhidden = 99\narch = \"chemprop3d\"\n[train]\nmax_epochs = 2\n",
    )
    .unwrap();
    let o = ok(confmpnn(
        tmp.path(),
        &[
            "train",
            "--config",
            "c.toml",
            "--data",
            "sep.jsonl",
            "--out",
            "run",
            "--set",
            "model.hidden=6",
            "--arch",
            "schnetfeatures",
        ],
    ));
    assert!(stdout(&o).starts_with("model: SchNetFeat (1-C)"), "{}", stdout(&o));
    let cfg = RunConfig::load(&tmp.path().join("run/config.toml")).unwrap();
    assert_eq!(cfg.model.hidden, 6);
    assert_eq!(cfg.train.max_epochs, 2);
}

#[test]
fn eval_reports_four_roce_points() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    train_small(tmp.path(), "run", &[]);
    let o = ok(confmpnn(
        tmp.path(),
        &["eval", "--checkpoint", "run/best.ckpt", "--out", "ev"],
    ));
    let text = stdout(&o);
    let roce: Vec<&str> = text.lines().filter(|l| l.starts_with("ROCE@")).collect();
    assert_eq!(roce.len(), 4);
    for (line, f) in roce.iter().zip(["0.5%", "1%", "2%", "5%"]) {
        assert!(line.starts_with(&format!("ROCE@{f} ")), "{line}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["roce"].as_object().unwrap().len(), 4);

    let spread = ok(confmpnn(
        tmp.path(),
        &["eval", "--checkpoint", "run/best.ckpt", "--checkpoint", "run/last.ckpt"],
    ));
    assert!(stdout(&spread).contains("±"));
}

#[test]
fn predict_emits_id_and_probability() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    train_small(tmp.path(), "run", &[]);
    let first = fs::read_to_string(tmp.path().join("sep.jsonl"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    fs::write(tmp.path().join("one.jsonl"), first + "\n").unwrap();
    let o = ok(confmpnn(
        tmp.path(),
        &["predict", "--checkpoint", "run/best.ckpt", "--data", "one.jsonl"],
    ));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    let obj = v.as_object().unwrap();
    assert_eq!(obj.len(), 2);
    assert_eq!(obj["id"], "sep000");
    let p = obj["p_hit"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    train_small(tmp.path(), "a", &["--jobs", "1"]);
    train_small(tmp.path(), "b", &["--jobs", "3"]);
    for f in ["log.csv", "best.ckpt", "last.ckpt", "split.json", "summary.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let run = |out: &str| {
        ok(confmpnn(
            tmp.path(),
            &["predict", "--checkpoint", "a/best.ckpt", "--out", out],
        ));
        fs::read(tmp.path().join(out).join("predictions.jsonl")).unwrap()
    };
    assert_eq!(run("p1"), run("p2"));
}

#[test]
fn export_then_transfer() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    train_small(tmp.path(), "run", &[]);
    ok(confmpnn(
        tmp.path(),
        &["export-fp", "--checkpoint", "run/best.ckpt", "--out", "fp"],
    ));
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("fp/fingerprints.json")).unwrap()).unwrap();
    assert_eq!(dump["dim"], 12);
    assert_eq!(dump["fingerprints"].as_object().unwrap().len(), 32);
    for with_mp in [false, true] {
        let out = if with_mp { "tl_mp" } else { "tl" };
        let mut args = vec![
            "train-tl",
            "--data",
            "sep.jsonl",
            "--dump",
            "fp/fingerprints.json",
            "--out",
            out,
        ];
        args.extend(SMALL);
        if with_mp {
            args.push("--with-mp");
        }
        let o = ok(confmpnn(tmp.path(), &args));
        assert!(stdout(&o).contains("transfer on 12-wide"), "{}", stdout(&o));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(tmp.path().join(out).join("summary.json")).unwrap()).unwrap();
        let model = summary["model"].as_str().unwrap();
        assert!(model.ends_with("fixed fingerprint"), "{model}");
        assert_eq!(model.starts_with("ChemProp"), with_mp, "{model}");
    }
}

#[test]
fn attention_report_names_descriptor_substitute() {
    let tmp = TempDir::new().unwrap();
    ok(confmpnn(
        tmp.path(),
        &[
            "synth", "--kind", "planted", "--n", "30", "--confs", "3", "--seed", "2", "--out", "p.jsonl",
        ],
    ));
    let mut args = vec![
        "train",
        "--data",
        "p.jsonl",
        "--out",
        "run",
        "--pool",
        "linear_attention",
        "--set",
        "pool.heads=2",
    ];
    args.extend(SMALL);
    ok(confmpnn(tmp.path(), &args));
    let o = ok(confmpnn(
        tmp.path(),
        &[
            "attention-report",
            "--checkpoint",
            "run/best.ckpt",
            "--split",
            "train",
            "--pairs",
            "100",
            "--out",
            "rep",
        ],
    ));
    assert!(stdout(&o).lines().next().unwrap().contains("substitute for E3FP"));
    let rows = fs::read_to_string(tmp.path().join("rep/attention.jsonl")).unwrap();
    for line in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let alpha: Vec<f64> = serde_json::from_value(v["alpha"].clone()).unwrap();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(v["head"].as_u64().unwrap() < 2);
    }
    let sim = fs::read_to_string(tmp.path().join("rep/similarity.json")).unwrap();
    assert!(sim.contains("WHIM-lite"));
}

#[test]
fn sweep_dry_run_samples_within_ranges() {
    let tmp = TempDir::new().unwrap();
    separable(tmp.path());
    ok(confmpnn(
        tmp.path(),
        &[
            "sweep",
            "--data",
            "sep.jsonl",
            "--out",
            "sw",
            "--samples",
            "5",
            "--dry-run",
        ],
    ));
    let rows = fs::read_to_string(tmp.path().join("sw/sweep.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 5);
    for line in rows.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let h = v["hidden"].as_u64().unwrap();
        let t = v["convolutions"].as_u64().unwrap();
        let d = v["dropout"].as_f64().unwrap();
        let r = v["readout_layers"].as_u64().unwrap();
        assert!((300..=2400).contains(&h) && (2..=6).contains(&t) && (0.0..=0.4).contains(&d) && (1..=3).contains(&r));
        let run = format!("sw/run{:03}/config.toml", v["run"].as_u64().unwrap());
        assert_eq!(RunConfig::load(&tmp.path().join(run)).unwrap().model.hidden as u64, h);
    }
}
