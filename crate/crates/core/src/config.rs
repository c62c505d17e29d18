//! Run configuration: one TOML file with `[filter]`, `[model]`, `[pool]`,
//! `[train]`, and `[split]` tables plus top-level paths, overridable with
//! `section.key=value` strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::FilterConfig;
use crate::error::{Error, Result};
use crate::io::read_to_string;
use crate::models::ModelConfig;
use crate::network::NetworkSpec;
use crate::pool::PoolConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train: 0.6,
            validation: 0.2,
            test: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Conformers fingerprinted per pass.
    pub conformer_batch: usize,
    pub filter: FilterConfig,
    pub model: ModelConfig,
    pub pool: PoolConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

/// `(key, default, meaning)` for every configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data", "unset", "input dataset (JSON Lines)"),
    ("out", "unset", "output directory"),
    ("jobs", "0", "worker threads, 0 = all cores"),
    ("conformer_batch", "7", "conformers fingerprinted per pass"),
    ("filter.max_atoms", "100", "reject species with more atoms"),
    ("filter.max_confs", "200", "keep this many highest-weight conformers"),
    (
        "filter.cutoff",
        "5.0",
        "reject species with a bond longer than this (Å)",
    ),
    (
        "model.arch",
        "cp3d_ndu",
        "chemprop2d | schnetfeatures | chemprop3d | cp3d_ndu",
    ),
    ("model.hidden", "300", "hidden dimension F"),
    (
        "model.convolutions",
        "arch default (3, 3, 2, 2)",
        "message-passing steps T",
    ),
    ("model.cutoff", "5.0", "neighbor cutoff (Å)"),
    ("model.n_gaussians", "10", "Gaussian distance basis size"),
    ("model.readout_layers", "2", "hidden readout layers"),
    ("model.dropout_conv", "0.0", "dropout after convolutions, [0, 0.4]"),
    (
        "model.dropout_readout",
        "0.0",
        "dropout between readout layers, [0, 0.4]",
    ),
    (
        "model.activation",
        "relu (shifted_softplus for schnetfeatures)",
        "relu | shifted_softplus",
    ),
    ("model.whim", "false", "append standardized WHIM-lite shape features"),
    (
        "pool.kind",
        "single_conf",
        "single_conf | linear_attention | pair_attention | avg_nbrs | weighted_mean",
    ),
    ("pool.heads", "1", "attention heads K"),
    ("pool.bins", "10", "weight-embedding bins S"),
    ("pool.dropout_attn", "0.0", "dropout on pooled head outputs"),
    ("train.lr0", "1e-4", "initial learning rate"),
    (
        "train.patience",
        "10",
        "stagnant validation epochs before the LR is cut",
    ),
    ("train.lr_factor", "0.5", "LR multiplier on plateau"),
    ("train.lr_floor", "1e-6", "stop once the LR falls below this"),
    ("train.max_epochs", "500", "epoch limit"),
    ("train.selection_metric", "prc", "prc | roc, metric behind best.ckpt"),
    ("train.batch_species", "1", "species per gradient step"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.adam_eps", "1e-8", "Adam denominator epsilon"),
    ("train.seed", "0", "random seed"),
    ("split.train", "0.6", "train fraction"),
    ("split.validation", "0.2", "validation fraction"),
    ("split.test", "0.2", "test fraction"),
];

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (TOML file or --set key=value):\n");
    for (k, d, m) in KEYS {
        s.push_str(&format!("  {k:width$}  default {d}; {m}\n"));
    }
    s
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.normalized())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn normalized(mut self) -> Self {
        if self.conformer_batch == 0 {
            self.conformer_batch = 7;
        }
        self
    }

    /// Applies `section.key=value` overrides. Values parse as TOML
    /// literals and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{p} is not a section")))?;
            }
            table.insert(last.to_string(), value);
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg.normalized())
    }

    pub fn network_spec(&self) -> NetworkSpec {
        let mut spec = NetworkSpec::new(self.model.clone(), self.pool.clone());
        spec.conformer_batch = self.conformer_batch;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let mut spec = self.network_spec();
        if spec.model.whim {
            // the scaler is fit later; check everything else now
            spec.model.whim = false;
        }
        spec.validate()?;
        self.train.validate()?;
        let total: f64 = self.split.fractions().iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.split.fractions().iter().any(|f| *f < 0.0) {
            return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
