//! Which conformers does attention pick?
//!
//! For random hit/hit and hit/miss species pairs, one conformer is chosen
//! per species, either the one receiving the most attention or a uniformly
//! random one, and the two choices are compared by cosine similarity of
//! their shape descriptors. If attention finds a shared binding-relevant
//! geometry, hit/hit pairs should look more alike under attention than
//! under random choice.
//!
//! The shape descriptor is the 9-value covariance-eigenvalue vector from
//! [`crate::featurize::shape_descriptor`], standing in for a 3D
//! pharmacophore fingerprint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MoleculeRecord;
use crate::error::{Error, Result};
use crate::featurize::shape_descriptor;
use crate::network::Network;
use crate::pool::PoolKind;
use crate::tensor::Tensor;

/// Descriptor name written into every report.
pub const DESCRIPTOR: &str = "WHIM-lite covariance eigenvalues (substitute for E3FP)";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Sample standard deviation over √n.
    pub sem: f64,
    pub n: usize,
}

pub fn mean_sem(xs: &[f64]) -> Result<MeanSem> {
    if xs.len() < 2 {
        return Err(Error::invalid("need at least two values for a standard error"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MeanSem {
        mean,
        sem: var.sqrt() / n.sqrt(),
        n: xs.len(),
    })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Conformer with the largest attention over all heads.
///
/// A linear head scores conformer `n` by `α_n`. A pairwise head scores it
/// by the attention it receives, `Σ_m α_mn`; every row of `α` sums to one,
/// so row sums cannot discriminate.
pub fn max_attention_conformer(kind: PoolKind, alphas: &[Tensor]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for a in alphas {
        let scores: Vec<f64> = match kind {
            PoolKind::LinearAttention => a.data().to_vec(),
            PoolKind::PairAttention => {
                let (r, c) = a.dims();
                (0..c).map(|m| (0..r).map(|n| a.get(n, m)).sum()).collect()
            }
            other => return Err(Error::invalid(format!("{} has no attention", other.name()))),
        };
        for (n, s) in scores.into_iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((n, s));
            }
        }
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::invalid("no attention coefficients"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub hit_hit: MeanSem,
    pub hit_miss: MeanSem,
    /// `hit_hit.mean − hit_miss.mean`
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub descriptor: String,
    pub n_pairs: usize,
    pub attention: SelectionSummary,
    pub random: SelectionSummary,
}

/// Pairwise-similarity comparison of attention versus random conformer
/// choice over `n_pairs` hit/hit and `n_pairs` hit/miss pairs.
pub fn attention_similarity(
    net: &Network,
    records: &[&MoleculeRecord],
    n_pairs: usize,
    seed: u64,
) -> Result<SimilarityReport> {
    let kind = net.spec.pool.kind;
    if !kind.is_attention() || !net.spec.message_passing {
        return Err(Error::invalid("attention similarity needs an attention-pooled network"));
    }
    let hits: Vec<usize> = (0..records.len()).filter(|&i| records[i].is_hit()).collect();
    let misses: Vec<usize> = (0..records.len()).filter(|&i| !records[i].is_hit()).collect();
    if hits.len() < 2 || misses.is_empty() {
        return Err(Error::invalid(format!(
            "need ≥ 2 hits and ≥ 1 miss, got {} and {}",
            hits.len(),
            misses.len()
        )));
    }
    if n_pairs < 2 {
        return Err(Error::invalid("n_pairs must be at least 2"));
    }
    let chosen: Vec<usize> = records
        .par_iter()
        .map(|r| {
            let mol = net.prepare(r, None)?;
            max_attention_conformer(kind, &net.attention(&mol)?)
        })
        .collect::<Result<_>>()?;
    let descriptors: Vec<Vec<[f64; 9]>> = records
        .iter()
        .map(|r| {
            r.conformers
                .iter()
                .map(|c| shape_descriptor(&r.atoms, &c.coords))
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sims = [[Vec::new(), Vec::new()], [Vec::new(), Vec::new()]];
    for (kind_idx, partner_pool) in [&hits, &misses].into_iter().enumerate() {
        for _ in 0..n_pairs {
            let a = hits[rng.gen_range(0..hits.len())];
            let b = loop {
                let b = partner_pool[rng.gen_range(0..partner_pool.len())];
                if b != a {
                    break b;
                }
            };
            let ra = rng.gen_range(0..descriptors[a].len());
            let rb = rng.gen_range(0..descriptors[b].len());
            sims[0][kind_idx].push(cosine(&descriptors[a][chosen[a]], &descriptors[b][chosen[b]]));
            sims[1][kind_idx].push(cosine(&descriptors[a][ra], &descriptors[b][rb]));
        }
    }
    let summarize = |s: &[Vec<f64>; 2]| -> Result<SelectionSummary> {
        let hh = mean_sem(&s[0])?;
        let hm = mean_sem(&s[1])?;
        Ok(SelectionSummary {
            hit_hit: hh,
            hit_miss: hm,
            delta: hh.mean - hm.mean,
        })
    };
    Ok(SimilarityReport {
        descriptor: DESCRIPTOR.to_string(),
        n_pairs,
        attention: summarize(&sims[0])?,
        random: summarize(&sims[1])?,
    })
}
