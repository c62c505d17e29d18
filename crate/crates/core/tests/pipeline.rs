//! End-to-end training, checkpoint selection, export and transfer on the
//! synthetic sets, plus split and uncertainty checks against enumeration
//! and a second statistics formula.

use std::sync::OnceLock;

use confmpnn::data::{scaffold_split, MoleculeRecord, Split};
use confmpnn::metrics::{evaluate_scores, uncertainty, MetricsReport, ROCE_FPRS};
use confmpnn::models::{Arch, ModelConfig};
use confmpnn::network::{Network, NetworkSpec, Prepared};
use confmpnn::params::Forward;
use confmpnn::pool::{PoolConfig, PoolKind};
use confmpnn::synthetic::{random_molecules, separable_set};
use confmpnn::train::{
    bce_loss, checkpoint_paths, evaluate, export_fingerprints, parse_log_csv, predict_all, prepare_all,
    prepare_with_dump, train, train_transfer, TrainConfig,
};

fn mean_bce(net: &Network, mols: &[Prepared]) -> f64 {
    let p = predict_all(net, mols).unwrap();
    p.iter()
        .zip(mols)
        .map(|(p, m)| bce_loss(*p, f64::from(m.label)))
        .sum::<f64>()
        / mols.len() as f64
}

struct Converged {
    records: Vec<MoleculeRecord>,
    train: Vec<usize>,
    val: Vec<usize>,
    net: Network,
    dir: tempfile::TempDir,
}

impl Converged {
    fn subset(&self, idx: &[usize]) -> Vec<&MoleculeRecord> {
        idx.iter().map(|i| &self.records[*i]).collect()
    }
}

/// One CND model trained to convergence on the 32-species separable set,
/// with its artifacts on disk; shared by the tests below.
fn converged() -> &'static Converged {
    static CELL: OnceLock<Converged> = OnceLock::new();
    CELL.get_or_init(|| {
        let records = separable_set(32, 3, 4242);
        let split = scaffold_split(&records, [0.6, 0.2, 0.2], 0).unwrap();
        let idx = |s: Split| -> Vec<usize> {
            (0..records.len())
                .filter(|i| split.get(&records[*i].id) == Some(s))
                .collect()
        };
        let (tr, va) = (idx(Split::Train), idx(Split::Validation));
        let spec = NetworkSpec::new(
            ModelConfig::new(Arch::Cp3dNdu, 32),
            PoolConfig::new(PoolKind::SingleConf),
        );
        let net = Network::new(spec, 11).unwrap();
        let pick = |ix: &[usize]| ix.iter().map(|i| &records[*i]).collect::<Vec<_>>();
        let t = prepare_all(&net, &pick(&tr)).unwrap();
        let v = prepare_all(&net, &pick(&va)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            max_epochs: 500,
            seed: 5,
            ..Default::default()
        };
        let out = train(net, &t, &v, &cfg, Some(dir.path())).unwrap();
        Converged {
            records,
            train: tr,
            val: va,
            net: out.last,
            dir,
        }
    })
}

#[test]
fn separable_set_trains_below_bce_threshold() {
    let c = converged();
    let t = prepare_all(&c.net, &c.subset(&c.train)).unwrap();
    let loss = mean_bce(&c.net, &t);
    assert!(loss < 0.05, "training BCE {loss}");
}

#[test]
fn best_checkpoints_dominate_every_logged_epoch() {
    let c = converged();
    let log = parse_log_csv(&std::fs::read_to_string(c.dir.path().join("log.csv")).unwrap()).unwrap();
    assert!(!log.is_empty());
    let paths = checkpoint_paths(c.dir.path());
    let path = |name: &str| paths.iter().find(|(n, _)| *n == name).unwrap().1.clone();
    let (roc_net, _) = Network::load(&path("best_roc")).unwrap();
    let (prc_net, _) = Network::load(&path("best_prc")).unwrap();
    let v = prepare_all(&roc_net, &c.subset(&c.val)).unwrap();
    let roc = evaluate(&roc_net, &v).unwrap().roc_auc;
    let prc = evaluate(&prc_net, &v).unwrap().prc_auc;
    for row in &log {
        assert!(
            roc >= row.val_roc - 1e-12,
            "epoch {}: {} > {roc}",
            row.epoch,
            row.val_roc
        );
        assert!(
            prc >= row.val_prc - 1e-12,
            "epoch {}: {} > {prc}",
            row.epoch,
            row.val_prc
        );
    }
    // the default selection metric is PRC
    let (best, _) = Network::load(&path("best")).unwrap();
    assert_eq!(best.params, prc_net.params);
}

#[test]
fn exported_fingerprint_is_the_readout_input() {
    let c = converged();
    let all: Vec<&MoleculeRecord> = c.records.iter().collect();
    let mols = prepare_all(&c.net, &all).unwrap();
    let dump = export_fingerprints(&c.net, &mols).unwrap();
    assert_eq!(dump.len(), 32);
    for m in &mols {
        let mut fw = Forward::inference(&c.net.params);
        c.net.forward(&mut fw, m).unwrap();
        let seen = fw.last_fingerprint.expect("forward records the readout input");
        assert_eq!(seen.data(), dump.get(&m.id).unwrap());
    }
    assert_eq!(export_fingerprints(&c.net, &mols).unwrap(), dump);
}

#[test]
fn transfer_on_converged_fingerprints_reaches_low_bce() {
    let c = converged();
    let all: Vec<&MoleculeRecord> = c.records.iter().collect();
    let dump = export_fingerprints(&c.net, &prepare_all(&c.net, &all).unwrap()).unwrap();
    let (tr, va) = (c.subset(&c.train), c.subset(&c.val));
    let cfg = TrainConfig {
        max_epochs: 500,
        seed: 6,
        ..Default::default()
    };
    let model = ModelConfig::new(Arch::Chemprop2d, 32);
    let out = train_transfer(&tr, &va, &dump, false, &model, &cfg, None).unwrap();
    let t = prepare_with_dump(&out.last, &tr, &dump).unwrap();
    let loss = mean_bce(&out.last, &t);
    assert!(loss < 0.1, "transfer BCE {loss}");
}

#[test]
fn scaffold_split_of_equal_groups_is_exact() {
    let mut records = random_molecules(100, 3, 1, 3);
    for (i, r) in records.iter_mut().enumerate() {
        r.scaffold_key = format!("group{:02}", i % 20);
    }
    let split = scaffold_split(&records, [0.6, 0.2, 0.2], 0).unwrap();
    assert_eq!(
        [
            split.count(Split::Train),
            split.count(Split::Validation),
            split.count(Split::Test)
        ],
        [60, 20, 20]
    );
    // enumerate every scaffold and every member
    for g in 0..20 {
        let members: Vec<Split> = records
            .iter()
            .filter(|r| r.scaffold_key == format!("group{g:02}"))
            .map(|r| split.get(&r.id).unwrap())
            .collect();
        assert_eq!(members.len(), 5);
        assert!(
            members.iter().all(|s| *s == members[0]),
            "group {g} split across {members:?}"
        );
    }
    assert_eq!(scaffold_split(&records, [0.6, 0.2, 0.2], 99).unwrap(), split);
}

fn fields(r: &MetricsReport) -> Vec<f64> {
    let mut v = vec![r.roc_auc, r.prc_auc];
    v.extend(ROCE_FPRS.iter().map(|f| r.roce_at(*f).unwrap()));
    v
}

#[test]
fn uncertainty_matches_two_pass_statistics() {
    let reports: Vec<MetricsReport> = (0..10)
        .map(|k| {
            let labels: Vec<bool> = (0..300).map(|i| i % 7 == 0).collect();
            let scores: Vec<f64> = (0..300)
                .map(|i| ((i * (k + 3)) as f64 * 0.37).sin() + if i % 7 == 0 { 0.3 } else { 0.0 })
                .collect();
            evaluate_scores(&scores, &labels).unwrap()
        })
        .collect();
    let got = uncertainty(&reports).unwrap();
    let rows: Vec<Vec<f64>> = reports.iter().map(fields).collect();
    let n = rows.len() as f64;
    for j in 0..rows[0].len() {
        // two-pass: mean first, then sum of squared deviations
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        assert!((fields(&got)[j] - mean).abs() < 1e-12 * mean.abs().max(1.0));
        let spread = fields(got.uncertainty.as_ref().unwrap())[j];
        assert!(
            (spread - var.sqrt()).abs() < 1e-10,
            "field {j}: {spread} vs {}",
            var.sqrt()
        );
    }
}
