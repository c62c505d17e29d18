//! Optimization: loss, Adam, the plateau schedule, the training loop,
//! evaluation, fingerprint export, and transfer learning.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BalancedSampler, MoleculeRecord};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::metrics::{evaluate_scores, prc_auc, roc_auc, MetricsReport};
use crate::models::{Arch, ModelConfig};
use crate::network::{Network, NetworkSpec, Prepared};
use crate::params::{Forward, ParamStore};
use crate::pool::{PoolConfig, PoolKind};
use crate::tensor::{Tensor, BCE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Prc,
    Roc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Non-improving validation epochs tolerated before the LR is cut.
    pub patience: usize,
    pub lr_factor: f64,
    /// Training stops once the LR falls below this.
    pub lr_floor: f64,
    pub max_epochs: usize,
    /// Which best checkpoint `best.ckpt` refers to.
    pub selection_metric: SelectionMetric,
    /// Species per gradient step.
    pub batch_species: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-4,
            patience: 10,
            lr_factor: 0.5,
            lr_floor: 1e-6,
            max_epochs: 500,
            selection_metric: SelectionMetric::Prc,
            batch_species: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_floor.partial_cmp(&self.lr0) != Some(Ordering::Less) || self.lr_floor <= 0.0 {
            return Err(Error::Config("need 0 < lr_floor < lr0".into()));
        }
        if self.patience < 1 || self.batch_species < 1 {
            return Err(Error::Config("patience and batch_species must be ≥ 1".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config("lr_factor must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("invalid Adam moment parameters".into()));
        }
        Ok(())
    }
}

/// `−[y ln p + (1−y) ln(1−p)]` with `p` clamped to `[ε, 1−ε]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Multiplies the LR by `factor` after `patience` consecutive epochs
/// without a strict decrease of the monitored loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    bad_epochs: usize,
    patience: usize,
    factor: f64,
    floor: f64,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, patience: usize, factor: f64, floor: f64) -> Self {
        PlateauScheduler {
            lr: lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
            floor,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr0, cfg.patience, cfg.lr_factor, cfg.lr_floor)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's loss; returns the LR for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn finished(&self) -> bool {
        self.lr < self.floor
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_roc: f64,
    pub val_prc: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,val_roc,val_prc";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{},{},{},{}\n",
            r.epoch, r.lr, r.train_loss, r.val_loss, r.val_roc, r.val_prc
        ));
    }
    s
}

/// Parses a log written by [`log_csv`].
pub fn parse_log_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Malformed {
            line: 1,
            message: "unexpected training log header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Malformed {
                line: i + 2,
                message: format!("bad log row {l:?}"),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            Ok(EpochLog {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                train_loss: num(2)?,
                val_loss: num(3)?,
                val_roc: num(4)?,
                val_prc: num(5)?,
            })
        })
        .collect()
}

/// Why training stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LrFloor,
    MaxEpochs,
}

/// A checkpoint kept in memory with the epoch and score that selected it.
#[derive(Clone, Debug)]
pub struct BestModel {
    pub epoch: usize,
    pub score: f64,
    pub network: Network,
}

pub struct TrainOutcome {
    pub last: Network,
    pub best_roc: BestModel,
    pub best_prc: BestModel,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn best(&self, metric: SelectionMetric) -> &BestModel {
        match metric {
            SelectionMetric::Roc => &self.best_roc,
            SelectionMetric::Prc => &self.best_prc,
        }
    }
}

fn draw_seed(seed: u64, epoch: usize, draw: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(draw as u64)
}

/// Loss and parameter gradients of one species in training mode.
pub fn species_gradients(net: &Network, mol: &Prepared, rng: ChaCha8Rng) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut fw = Forward::train(&net.params, rng);
    let p = net.forward(&mut fw, mol)?;
    let loss = fw.graph.bce(p, &[f64::from(mol.label)])?;
    let value = fw.graph.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss on species {}", mol.id)));
    }
    let grads = fw.graph.backward(loss)?;
    Ok((value, fw.param_grads(&grads)))
}

/// Hit probabilities in inference mode, computed in parallel.
pub fn predict_all(net: &Network, mols: &[Prepared]) -> Result<Vec<f64>> {
    mols.par_iter().map(|m| net.predict(m)).collect()
}

/// Mean BCE and both ranking metrics on `mols`.
fn validate(net: &Network, mols: &[Prepared]) -> Result<(f64, f64, f64)> {
    let scores = predict_all(net, mols)?;
    let labels: Vec<bool> = mols.iter().map(Prepared::is_hit).collect();
    let loss = scores
        .iter()
        .zip(mols)
        .map(|(p, m)| bce_loss(*p, f64::from(m.label)))
        .sum::<f64>()
        / mols.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite validation loss".into()));
    }
    Ok((loss, roc_auc(&scores, &labels)?, prc_auc(&scores, &labels)?))
}

/// Trains `net` on `train`, monitoring `val`.
///
/// With `out_dir`, the log (`log.csv`), the final parameters
/// (`last.ckpt`), and the best-by-validation checkpoints
/// (`best_roc.ckpt`, `best_prc.ckpt`, and `best.ckpt` for the configured
/// selection metric) are written there.
pub fn train(
    mut net: Network,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<bool> = train.iter().map(Prepared::is_hit).collect();
    let mut sampler = BalancedSampler::new(&labels, cfg.seed)?;
    if !val.iter().any(Prepared::is_hit) || val.iter().all(Prepared::is_hit) {
        return Err(Error::SingleClass("validation split".into()));
    }
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut sched = PlateauScheduler::from_config(cfg);
    let mut log = Vec::new();
    let mut best_roc: Option<BestModel> = None;
    let mut best_prc: Option<BestModel> = None;
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        let draws = sampler.epoch();
        let mut total = 0.0;
        for (b, chunk) in draws.chunks(cfg.batch_species).enumerate() {
            let results: Vec<_> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let rng = ChaCha8Rng::seed_from_u64(draw_seed(cfg.seed, epoch, b * cfg.batch_species + k));
                    species_gradients(&net, &train[i], rng)
                })
                .collect();
            let scale = 1.0 / chunk.len() as f64;
            let mut summed: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
                total += loss;
                for (name, g) in grads {
                    match summed.get_mut(&name) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, x)| *a += x * scale),
                        None => {
                            let mut g = g;
                            g.data_mut().iter_mut().for_each(|x| *x *= scale);
                            summed.insert(name, g);
                        }
                    }
                }
            }
            adam.step(&mut net.params, &summed, lr);
        }
        if net.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}")));
        }
        let train_loss = total / draws.len() as f64;
        let (val_loss, val_roc, val_prc) = validate(&net, val)?;
        let row = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_roc,
            val_prc,
        };
        log::info!(
            "epoch {epoch:4} lr {lr:.2e} train {train_loss:.4} val {val_loss:.4} roc {val_roc:.4} prc {val_prc:.4}"
        );
        log.push(row);
        let improved = |best: &Option<BestModel>, score: f64| best.as_ref().is_none_or(|b| score > b.score);
        if improved(&best_roc, val_roc) {
            best_roc = Some(BestModel {
                epoch,
                score: val_roc,
                network: net.clone(),
            });
            if let Some(dir) = out_dir {
                net.save(&dir.join("best_roc.ckpt"), epoch)?;
                if cfg.selection_metric == SelectionMetric::Roc {
                    net.save(&dir.join("best.ckpt"), epoch)?;
                }
            }
        }
        if improved(&best_prc, val_prc) {
            best_prc = Some(BestModel {
                epoch,
                score: val_prc,
                network: net.clone(),
            });
            if let Some(dir) = out_dir {
                net.save(&dir.join("best_prc.ckpt"), epoch)?;
                if cfg.selection_metric == SelectionMetric::Prc {
                    net.save(&dir.join("best.ckpt"), epoch)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            write_atomic(&dir.join("log.csv"), log_csv(&log).as_bytes())?;
        }
        sched.observe(val_loss);
        if sched.finished() {
            stop = StopReason::LrFloor;
            break;
        }
    }
    if let Some(dir) = out_dir {
        net.save(&dir.join("last.ckpt"), log.len())?;
    }
    Ok(TrainOutcome {
        last: net,
        best_roc: best_roc.ok_or(Error::EmptyDataset)?,
        best_prc: best_prc.ok_or(Error::EmptyDataset)?,
        log,
        stop,
    })
}

/// Scores every species and computes the ranking metrics.
pub fn evaluate(net: &Network, mols: &[Prepared]) -> Result<MetricsReport> {
    let scores = predict_all(net, mols)?;
    let labels: Vec<bool> = mols.iter().map(Prepared::is_hit).collect();
    evaluate_scores(&scores, &labels)
}

/// Fixed per-molecule fingerprints from a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FingerprintDump {
    pub dim: usize,
    pub fingerprints: BTreeMap<String, Vec<f64>>,
}

impl FingerprintDump {
    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.fingerprints
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no fixed fingerprint for species {id}")))
    }

    pub fn len(&self) -> usize {
        self.fingerprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fingerprints.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let dump: FingerprintDump = serde_json::from_str(&read_to_string(path)?)?;
        if dump.fingerprints.values().any(|v| v.len() != dump.dim) {
            return Err(Error::invalid("fingerprint dump has entries of inconsistent width"));
        }
        Ok(dump)
    }
}

/// Inference-mode readout inputs for every molecule.
pub fn export_fingerprints(net: &Network, mols: &[Prepared]) -> Result<FingerprintDump> {
    let fps: Vec<Vec<f64>> = mols.par_iter().map(|m| net.fingerprint(m)).collect::<Result<_>>()?;
    let dim = net.spec.readout_dim();
    Ok(FingerprintDump {
        dim,
        fingerprints: mols.iter().map(|m| m.id.clone()).zip(fps).collect(),
    })
}

/// Network for transfer learning on a fixed fingerprint dump: a readout
/// on the dump alone, or on the dump concatenated with a fresh 2D
/// fingerprint.
pub fn transfer_network(
    dump: &FingerprintDump,
    with_message_passing: bool,
    model: &ModelConfig,
    seed: u64,
) -> Result<Network> {
    let mut model = model.clone();
    model.arch = Arch::Chemprop2d;
    model.whim = false;
    let mut spec = NetworkSpec::new(model, PoolConfig::new(PoolKind::SingleConf));
    spec.message_passing = with_message_passing;
    spec.fixed_dim = dump.dim;
    Network::new(spec, seed)
}

/// Prepares records for a transfer network, looking up each species in the dump.
pub fn prepare_with_dump(net: &Network, records: &[&MoleculeRecord], dump: &FingerprintDump) -> Result<Vec<Prepared>> {
    records
        .par_iter()
        .map(|r| net.prepare(r, Some(dump.get(&r.id)?)))
        .collect()
}

/// Transfer learning from a fingerprint dump; see [`transfer_network`].
pub fn train_transfer(
    train_records: &[&MoleculeRecord],
    val_records: &[&MoleculeRecord],
    dump: &FingerprintDump,
    with_message_passing: bool,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let net = transfer_network(dump, with_message_passing, model, cfg.seed)?;
    let tr = prepare_with_dump(&net, train_records, dump)?;
    let va = prepare_with_dump(&net, val_records, dump)?;
    train(net, &tr, &va, cfg, out_dir)
}

/// Prepares records without fixed fingerprints, in parallel.
pub fn prepare_all(net: &Network, records: &[&MoleculeRecord]) -> Result<Vec<Prepared>> {
    records.par_iter().map(|r| net.prepare(r, None)).collect()
}

/// Paths of the checkpoints written by [`train`].
pub fn checkpoint_paths(dir: &Path) -> [(&'static str, PathBuf); 4] {
    [
        ("best", dir.join("best.ckpt")),
        ("best_roc", dir.join("best_roc.ckpt")),
        ("best_prc", dir.join("best_prc.ckpt")),
        ("last", dir.join("last.ckpt")),
    ]
}
