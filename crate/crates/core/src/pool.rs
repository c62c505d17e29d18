//! Pooling per-conformer fingerprints into one molecule fingerprint.
//!
//! Attention pooling first embeds each conformer's statistical weight
//! `p` as `d = softmax(D p + b)` over `S` bins and fuses it with the
//! conformer fingerprint, `q = H [h ‖ d] + b`. Each head then projects
//! `z = A q` and either
//!
//! * linear attention: `c_n = a · z_n`, `α = softmax_n(LeakyReLU(c))`,
//!   `Q = τ(Σ_n α_n z_n)`; or
//! * pairwise attention: `c_nm = a · [z_n ‖ z_m]`,
//!   `α_nm = softmax_m(LeakyReLU(c_nm))`, `Q = τ((1/N) Σ_nm α_nm z_m)`.
//!
//! Heads are concatenated. The weight embedding `(D, H)` is shared by all
//! heads; each head owns its `(A, a)`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{distance, MoleculeRecord};
use crate::error::{Error, Result};
use crate::featurize::Geometry;
use crate::models::Activation;
use crate::params::{init_linear, Forward, ParamStore};
use crate::tensor::{Tensor, Var};

/// Negative slope of the LeakyReLU applied to attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    LinearAttention,
    PairAttention,
    AvgNbrs,
    SingleConf,
    WeightedMean,
}

impl PoolKind {
    pub const ALL: [PoolKind; 5] = [
        PoolKind::SingleConf,
        PoolKind::LinearAttention,
        PoolKind::PairAttention,
        PoolKind::AvgNbrs,
        PoolKind::WeightedMean,
    ];

    pub fn is_attention(self) -> bool {
        matches!(self, PoolKind::LinearAttention | PoolKind::PairAttention)
    }

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::LinearAttention => "linear_attention",
            PoolKind::PairAttention => "pair_attention",
            PoolKind::AvgNbrs => "avg_nbrs",
            PoolKind::SingleConf => "single_conf",
            PoolKind::WeightedMean => "weighted_mean",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown pool kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub kind: PoolKind,
    /// Attention heads K.
    pub heads: usize,
    /// Weight-embedding bins S.
    pub bins: usize,
    pub dropout_attn: f64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            kind: PoolKind::SingleConf,
            heads: 1,
            bins: 10,
            dropout_attn: 0.0,
        }
    }
}

impl PoolConfig {
    pub fn new(kind: PoolKind) -> Self {
        PoolConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads < 1 || self.bins < 1 {
            return Err(Error::Config("heads and bins must be ≥ 1".into()));
        }
        if !(0.0..=0.4).contains(&self.dropout_attn) {
            return Err(Error::Config(format!(
                "dropout_attn = {} outside [0, 0.4]",
                self.dropout_attn
            )));
        }
        Ok(())
    }

    /// Length of the pooled fingerprint for hidden size `f`.
    pub fn output_dim(&self, f: usize) -> usize {
        if self.kind.is_attention() {
            self.heads * f
        } else {
            f
        }
    }
}

/// Pooling parameters under prefix `pool.`; none for non-attention kinds.
pub fn init_pool(cfg: &PoolConfig, f: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    if !cfg.kind.is_attention() {
        return;
    }
    init_linear(store, "pool.D", 1, cfg.bins, rng);
    init_linear(store, "pool.H", f + cfg.bins, f, rng);
    for k in 0..cfg.heads {
        store.init_weight(&format!("pool.head{k}.A.w"), f, f, rng);
        match cfg.kind {
            PoolKind::LinearAttention => store.init_weight(&format!("pool.head{k}.a.w"), f, 1, rng),
            _ => {
                store.init_weight(&format!("pool.head{k}.a_self.w"), f, 1, rng);
                store.init_weight(&format!("pool.head{k}.a_other.w"), f, 1, rng);
            }
        }
    }
}

/// `d = softmax(D p + b)` for every weight; `N × S`.
pub fn embed_weight(fw: &mut Forward<'_>, weights: &[f64]) -> Result<Var> {
    if weights.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("conformer weights must lie in [0, 1]"));
    }
    let p = fw.constant(Tensor::column(weights.to_vec()));
    let pre = fw.linear(p, "pool.D")?;
    Ok(fw.graph.softmax(pre))
}

/// `q = H [h ‖ d] + b`; `N × F`.
pub fn fuse_weight(fw: &mut Forward<'_>, h: Var, d: Var) -> Result<Var> {
    let cat = fw.graph.concat_cols(&[h, d])?;
    fw.linear(cat, "pool.H")
}

/// One head's pooled vector (`1 × F`) and its coefficients.
pub struct HeadOutput {
    pub pooled: Var,
    /// `1 × N` (linear) or `N × N` (pairwise).
    pub alpha: Var,
}

pub fn linear_attention(fw: &mut Forward<'_>, q: Var, head: usize, act: Activation) -> Result<HeadOutput> {
    let a_mat = fw.param(&format!("pool.head{head}.A.w"))?;
    let a_vec = fw.param(&format!("pool.head{head}.a.w"))?;
    let z = fw.graph.matmul(q, a_mat)?;
    let c = fw.graph.matmul(z, a_vec)?;
    let c = fw.graph.transpose(c);
    let c = fw.graph.leaky_relu(c, ATTENTION_SLOPE);
    let alpha = fw.graph.softmax(c);
    let pooled = fw.graph.matmul(alpha, z)?;
    Ok(HeadOutput {
        pooled: act.apply(fw, pooled),
        alpha,
    })
}

pub fn pair_attention(fw: &mut Forward<'_>, q: Var, head: usize, act: Activation) -> Result<HeadOutput> {
    let a_mat = fw.param(&format!("pool.head{head}.A.w"))?;
    let a_self = fw.param(&format!("pool.head{head}.a_self.w"))?;
    let a_other = fw.param(&format!("pool.head{head}.a_other.w"))?;
    let n = fw.graph.value(q).rows();
    if n == 0 {
        return Err(Error::invalid("attention over zero conformers"));
    }
    let z = fw.graph.matmul(q, a_mat)?;
    // c_nm = a_self·z_n + a_other·z_m
    let s_self = fw.graph.matmul(z, a_self)?;
    let ones = fw.constant(Tensor::full(1, n, 1.0));
    let s_self = fw.graph.matmul(s_self, ones)?;
    let s_other = fw.graph.matmul(z, a_other)?;
    let s_other = fw.graph.transpose(s_other);
    let c = fw.graph.add(s_self, s_other)?;
    let c = fw.graph.leaky_relu(c, ATTENTION_SLOPE);
    let alpha = fw.graph.softmax(c);
    let weighted = fw.graph.matmul(alpha, z)?;
    let summed = fw.graph.sum_rows(weighted);
    let mean = fw.graph.scale(summed, 1.0 / n as f64);
    Ok(HeadOutput {
        pooled: act.apply(fw, mean),
        alpha,
    })
}

/// `[Q¹ ‖ … ‖ Qᴷ]`.
pub fn multihead_concat(fw: &mut Forward<'_>, heads: &[Var]) -> Result<Var> {
    let Some(first) = heads.first() else {
        return Err(Error::invalid("no attention heads"));
    };
    let f = fw.graph.value(*first).cols();
    if heads.iter().any(|h| fw.graph.value(*h).cols() != f) {
        return Err(Error::invalid("attention heads differ in width"));
    }
    fw.graph.concat_cols(heads)
}

/// Full attention pool over `fingerprints` (`N × F`) with statistical
/// `weights`; returns `1 × K·F`. Per-head coefficients are left in
/// `fw.attention`.
pub fn attention_pool(
    fw: &mut Forward<'_>,
    cfg: &PoolConfig,
    act: Activation,
    fingerprints: Var,
    weights: &[f64],
) -> Result<Var> {
    let d = embed_weight(fw, weights)?;
    let q = fuse_weight(fw, fingerprints, d)?;
    let mut pooled = Vec::with_capacity(cfg.heads);
    fw.attention.clear();
    for k in 0..cfg.heads {
        let out = match cfg.kind {
            PoolKind::LinearAttention => linear_attention(fw, q, k, act)?,
            PoolKind::PairAttention => pair_attention(fw, q, k, act)?,
            other => return Err(Error::invalid(format!("{} is not an attention pool", other.name()))),
        };
        let alpha = fw.graph.value(out.alpha).clone();
        fw.attention.push(alpha);
        pooled.push(fw.dropout(out.pooled, cfg.dropout_attn)?);
    }
    multihead_concat(fw, &pooled)
}

/// `Q = Σ_n p_n h_n`; `1 × F`.
pub fn weighted_mean(fw: &mut Forward<'_>, fingerprints: Var, weights: &[f64]) -> Result<Var> {
    let p = fw.constant(Tensor::row(weights.to_vec()));
    fw.graph.matmul(p, fingerprints)
}

/// Weight-averaged distance matrix `d̄_ij = Σ_n w_n d_ij⁽ⁿ⁾` (`n × n`).
pub fn average_distances(record: &MoleculeRecord) -> Result<Tensor> {
    if record.conformers.is_empty() {
        return Err(Error::invalid(format!("molecule {} has no conformers", record.id)));
    }
    let n = record.n_atoms();
    let mut out = Tensor::zeros(n, n);
    for c in &record.conformers {
        for i in 0..n {
            for j in 0..n {
                let v = out.get(i, j) + c.weight * distance(&c.coords[i], &c.coords[j]);
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// The single effective geometry of the average-distance model.
///
/// Candidate pairs are those within `r_cut` in any conformer; a candidate
/// is kept when its averaged distance is also within `r_cut`.
pub fn avg_nbrs_geometry(record: &MoleculeRecord, r_cut: f64) -> Result<Geometry> {
    let avg = average_distances(record)?;
    let n = record.n_atoms();
    let mut close = vec![false; n * n];
    for c in &record.conformers {
        for i in 0..n {
            for j in i + 1..n {
                if distance(&c.coords[i], &c.coords[j]) <= r_cut {
                    close[i * n + j] = true;
                }
            }
        }
    }
    Ok(Geometry::from_distances(n, r_cut, |i, j| {
        if close[i * n + j] {
            avg.get(i, j)
        } else {
            f64::INFINITY
        }
    }))
}
