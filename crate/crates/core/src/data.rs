//! Labeled molecules with conformer ensembles: the on-disk format,
//! ingestion filters, scaffold splitting, class-balanced sampling and
//! conformer batching.
//!
//! The dataset file is JSON Lines, one molecule per line:
//!
//! ```text
//! {"id": str, "label": 0|1, "scaffold": str,
//!  "atoms": [{"el": str, "charge": int, "nH": int, "hyb": str, "arom": bool,
//!             "chir": str, "deg": int, "mass": float}],
//!  "bonds": [{"a": int, "b": int, "type": str, "conj": bool, "ring": bool, "stereo": str}],
//!  "conformers": [{"w": float, "xyz": [[x, y, z], ...]}]}
//! ```
//!
//! Coordinates are in Å. The canonical form written by [`to_jsonl`] uses
//! the same schema.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hybridization {
    Sp,
    Sp2,
    Sp3,
    Sp3d,
    Sp3d2,
    #[serde(other)]
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Chirality {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "CW")]
    Clockwise,
    #[serde(rename = "CCW")]
    CounterClockwise,
    #[serde(other, rename = "other")]
    Other,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    #[serde(rename = "el")]
    pub element: String,
    #[serde(rename = "charge")]
    pub formal_charge: i32,
    #[serde(rename = "nH")]
    pub num_h: u32,
    #[serde(rename = "hyb")]
    pub hybridization: Hybridization,
    #[serde(rename = "arom")]
    pub aromatic: bool,
    #[serde(rename = "chir")]
    pub chirality: Chirality,
    #[serde(rename = "deg")]
    pub degree: u32,
    pub mass: f64,
}

impl AtomSpec {
    /// Neutral, non-aromatic, sp3 atom with no hydrogens.
    pub fn simple(element: &str, mass: f64, degree: u32) -> Self {
        AtomSpec {
            element: element.to_string(),
            formal_charge: 0,
            num_h: 0,
            hybridization: Hybridization::Sp3,
            aromatic: false,
            chirality: Chirality::None,
            degree,
            mass,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BondStereo {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "any")]
    Any,
    E,
    Z,
    #[serde(rename = "cis")]
    Cis,
    #[serde(rename = "trans")]
    Trans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondSpec {
    pub a: usize,
    pub b: usize,
    #[serde(rename = "type")]
    pub bond_type: BondType,
    #[serde(rename = "conj")]
    pub conjugated: bool,
    #[serde(rename = "ring")]
    pub in_ring: bool,
    pub stereo: BondStereo,
}

impl BondSpec {
    pub fn single(a: usize, b: usize) -> Self {
        BondSpec {
            a,
            b,
            bond_type: BondType::Single,
            conjugated: false,
            in_ring: false,
            stereo: BondStereo::None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conformer {
    #[serde(rename = "w")]
    pub weight: f64,
    #[serde(rename = "xyz")]
    pub coords: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeRecord {
    pub id: String,
    pub label: u8,
    #[serde(rename = "scaffold")]
    pub scaffold_key: String,
    pub atoms: Vec<AtomSpec>,
    pub bonds: Vec<BondSpec>,
    pub conformers: Vec<Conformer>,
}

impl MoleculeRecord {
    pub fn is_hit(&self) -> bool {
        self.label == 1
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.conformers.iter().map(|c| c.weight).collect()
    }
}

pub fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Ingestion limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub max_atoms: usize,
    pub max_confs: usize,
    /// Å
    pub cutoff: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_atoms: 100,
            max_confs: 200,
            cutoff: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectRule {
    MaxAtoms,
    /// A conformer's coordinate count disagrees with the atom count.
    CoordsMismatch,
    /// Self-bond, out-of-range index, or duplicate bond.
    InvalidGraph,
    NoConformers,
    /// Negative or non-finite weights, or all kept weights zero.
    InvalidWeights,
    BondExceedsCutoff,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub rule: RejectRule,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub records: Vec<MoleculeRecord>,
    pub rejections: Vec<Rejection>,
}

pub fn ingest(path: &Path, cfg: &FilterConfig) -> Result<IngestReport> {
    ingest_str(&crate::io::read_to_string(path)?, cfg)
}

/// Parses and filters a JSON Lines dataset.
///
/// Species are rejected (and reported) when they exceed `max_atoms`, have a
/// conformer whose coordinate count differs from the atom count, have an
/// invalid bond list, or have any bonded pair longer than `cutoff` in any
/// kept conformer. Conformers are sorted by descending weight, truncated to
/// `max_confs`, and renormalized.
pub fn ingest_str(text: &str, cfg: &FilterConfig) -> Result<IngestReport> {
    if cfg.max_confs == 0 {
        return Err(Error::invalid("max_confs must be at least 1"));
    }
    let mut report = IngestReport::default();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MoleculeRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.label > 1 {
            return Err(Error::Malformed {
                line: line_no,
                message: format!("label must be 0 or 1, got {}", rec.label),
            });
        }
        match filter_record(rec, cfg) {
            Ok(r) => report.records.push(r),
            Err(rej) => report.rejections.push(rej),
        }
    }
    if report.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(report)
}

fn filter_record(mut rec: MoleculeRecord, cfg: &FilterConfig) -> std::result::Result<MoleculeRecord, Rejection> {
    let reject = |rec: &MoleculeRecord, rule| Rejection {
        id: rec.id.clone(),
        rule,
    };
    let n = rec.atoms.len();
    if n > cfg.max_atoms {
        return Err(reject(&rec, RejectRule::MaxAtoms));
    }
    let mut seen = HashSet::new();
    for b in &rec.bonds {
        if b.a == b.b || b.a >= n || b.b >= n || !seen.insert((b.a.min(b.b), b.a.max(b.b))) {
            return Err(reject(&rec, RejectRule::InvalidGraph));
        }
    }
    if rec.conformers.is_empty() {
        return Err(reject(&rec, RejectRule::NoConformers));
    }
    if rec.conformers.iter().any(|c| c.coords.len() != n) {
        return Err(reject(&rec, RejectRule::CoordsMismatch));
    }
    if rec
        .conformers
        .iter()
        .any(|c| !c.weight.is_finite() || c.weight < 0.0 || c.coords.iter().flatten().any(|x| !x.is_finite()))
    {
        return Err(reject(&rec, RejectRule::InvalidWeights));
    }
    rec.conformers.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    rec.conformers.truncate(cfg.max_confs);
    let total: f64 = rec.conformers.iter().map(|c| c.weight).sum();
    if total <= 0.0 {
        return Err(reject(&rec, RejectRule::InvalidWeights));
    }
    // already-normalized ensembles are left untouched so re-ingestion is exact
    if (total - 1.0).abs() > 1e-12 {
        for c in &mut rec.conformers {
            c.weight /= total;
        }
    }
    for c in &rec.conformers {
        for b in &rec.bonds {
            if distance(&c.coords[b.a], &c.coords[b.b]) > cfg.cutoff {
                return Err(reject(&rec, RejectRule::BondExceedsCutoff));
            }
        }
    }
    Ok(rec)
}

/// Canonical JSON Lines form of `records`.
pub fn to_jsonl(records: &[MoleculeRecord]) -> Result<String> {
    crate::io::to_json_lines(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

/// Species id → split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignment.get(id).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignment.values().filter(|s| **s == split).count()
    }

    /// Records assigned to `split`, in input order.
    pub fn select<'a>(&self, records: &'a [MoleculeRecord], split: Split) -> Vec<&'a MoleculeRecord> {
        records.iter().filter(|r| self.get(&r.id) == Some(split)).collect()
    }
}

/// Groups species by scaffold and packs the groups, largest first, into
/// whichever split is furthest below its target count.
///
/// Groups of equal size are taken in scaffold-key order, and ties between
/// splits go to the earlier of train, validation, test. The result is fully
/// determined by the records; `_seed` is accepted for interface stability.
pub fn scaffold_split(records: &[MoleculeRecord], fractions: [f64; 3], _seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| *f < 0.0 || !f.is_finite()) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in records {
        groups.entry(r.scaffold_key.as_str()).or_default().push(r.id.as_str());
    }
    let mut ordered: Vec<(&str, Vec<&str>)> = groups.into_iter().collect();
    ordered.sort_by_key(|g| std::cmp::Reverse(g.1.len()));

    let n = records.len() as f64;
    let targets = fractions.map(|f| f * n);
    let mut counts = [0usize; 3];
    let mut out = SplitAssignment::default();
    for (_, ids) in ordered {
        let mut best = 0;
        for k in 1..3 {
            if targets[k] - counts[k] as f64 > targets[best] - counts[best] as f64 {
                best = k;
            }
        }
        counts[best] += ids.len();
        for id in ids {
            out.assignment.insert(id.to_string(), Split::ALL[best]);
        }
    }
    Ok(out)
}

/// Restrictive over-sampling: each draw picks hit or miss with probability
/// ½, then a uniform member of that class, with replacement.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    hits: Vec<usize>,
    misses: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    /// `labels[i]` is the class of item `i`; draws yield indices into it.
    pub fn new(labels: &[bool], seed: u64) -> Result<Self> {
        let hits: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
        let misses: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
        if hits.is_empty() || misses.is_empty() {
            return Err(Error::SingleClass(format!(
                "{} hits, {} misses",
                hits.len(),
                misses.len()
            )));
        }
        Ok(BalancedSampler {
            hits,
            misses,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn for_records(records: &[&MoleculeRecord], seed: u64) -> Result<Self> {
        let labels: Vec<bool> = records.iter().map(|r| r.is_hit()).collect();
        Self::new(&labels, seed)
    }

    /// One epoch: as many draws as there are items.
    pub fn epoch(&mut self) -> Vec<usize> {
        let n = self.hits.len() + self.misses.len();
        self.take(n).collect()
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let pool = if self.rng.gen_bool(0.5) {
            &self.hits
        } else {
            &self.misses
        };
        pool.choose(&mut self.rng).copied()
    }
}

/// Contiguous index ranges of at most `batch_size` conformers covering
/// `0..n_conformers` in stored (descending-weight) order.
pub fn conformer_batches(n_conformers: usize, batch_size: usize) -> Result<Vec<Range<usize>>> {
    if batch_size < 1 {
        return Err(Error::invalid("conformer batch size must be at least 1"));
    }
    if n_conformers == 0 {
        return Err(Error::invalid("record has no conformers"));
    }
    Ok((0..n_conformers)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n_conformers))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, n_atoms: usize, weights: &[f64]) -> MoleculeRecord {
        MoleculeRecord {
            id: id.to_string(),
            label: 0,
            scaffold_key: id.to_string(),
            atoms: (0..n_atoms).map(|_| AtomSpec::simple("C", 12.011, 1)).collect(),
            bonds: (1..n_atoms).map(|i| BondSpec::single(i - 1, i)).collect(),
            conformers: weights
                .iter()
                .map(|&w| Conformer {
                    weight: w,
                    coords: (0..n_atoms).map(|i| [1.5 * i as f64, 0.0, 0.0]).collect(),
                })
                .collect(),
        }
    }

    fn ingest_records(recs: &[MoleculeRecord], cfg: &FilterConfig) -> Result<IngestReport> {
        ingest_str(&to_jsonl(recs).unwrap(), cfg)
    }

    #[test]
    fn too_many_atoms_rejected() {
        let recs = vec![record("big", 101, &[1.0]), record("ok", 100, &[1.0])];
        let rep = ingest_records(&recs, &FilterConfig::default()).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(
            rep.rejections,
            vec![Rejection {
                id: "big".into(),
                rule: RejectRule::MaxAtoms
            }]
        );
    }

    #[test]
    fn top_conformers_renormalized() {
        let cfg = FilterConfig {
            max_confs: 2,
            ..Default::default()
        };
        let rep = ingest_records(&[record("m", 3, &[0.1, 0.5, 0.3])], &cfg).unwrap();
        let w = rep.records[0].weights();
        assert_eq!(w.len(), 2);
        assert!((w[0] - 0.625).abs() < 1e-12 && (w[1] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn long_bond_rejected() {
        let mut r = record("long", 2, &[0.5, 0.5]);
        r.conformers[1].coords[1] = [6.0, 0.0, 0.0];
        let rep = ingest_records(&[r, record("ok", 2, &[1.0])], &FilterConfig::default()).unwrap();
        assert_eq!(rep.rejections[0].rule, RejectRule::BondExceedsCutoff);
    }

    #[test]
    fn coords_mismatch_and_bad_graph_rejected() {
        let mut a = record("a", 3, &[1.0]);
        a.conformers[0].coords.pop();
        let mut b = record("b", 3, &[1.0]);
        b.bonds.push(BondSpec::single(1, 0));
        let rep = ingest_records(&[a, b, record("c", 2, &[1.0])], &FilterConfig::default()).unwrap();
        let rules: Vec<_> = rep.rejections.iter().map(|r| r.rule).collect();
        assert_eq!(rules, vec![RejectRule::CoordsMismatch, RejectRule::InvalidGraph]);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = to_jsonl(&[record("a", 2, &[1.0])]).unwrap();
        let text = format!("{good}{{not json}}\n");
        match ingest_str(&text, &FilterConfig::default()) {
            Err(Error::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn empty_after_filtering_is_error() {
        let r = ingest_records(&[record("big", 101, &[1.0])], &FilterConfig::default());
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    #[test]
    fn unknown_hybridization_maps_to_other() {
        let line = r#"{"id":"x","label":1,"scaffold":"s","atoms":[{"el":"Xe","charge":0,"nH":0,"hyb":"weird","arom":false,"chir":"?","deg":0,"mass":131.3}],"bonds":[],"conformers":[{"w":1.0,"xyz":[[0,0,0]]}]}"#;
        let rep = ingest_str(line, &FilterConfig::default()).unwrap();
        assert_eq!(rep.records[0].atoms[0].hybridization, Hybridization::Other);
        assert_eq!(rep.records[0].atoms[0].chirality, Chirality::Other);
    }

    #[test]
    fn split_ten_distinct_scaffolds() {
        let recs: Vec<_> = (0..10).map(|i| record(&format!("m{i}"), 2, &[1.0])).collect();
        let s = scaffold_split(&recs, [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(
            (s.count(Split::Train), s.count(Split::Validation), s.count(Split::Test)),
            (6, 2, 2)
        );
    }

    #[test]
    fn single_scaffold_all_train() {
        let mut recs: Vec<_> = (0..7).map(|i| record(&format!("m{i}"), 2, &[1.0])).collect();
        recs.iter_mut().for_each(|r| r.scaffold_key = "core".into());
        let s = scaffold_split(&recs, [0.6, 0.2, 0.2], 0).unwrap();
        assert_eq!(s.count(Split::Train), 7);
    }

    #[test]
    fn split_fractions_validated() {
        assert!(scaffold_split(&[], [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn conformer_batch_shapes() {
        assert_eq!(conformer_batches(10, 4).unwrap(), vec![0..4, 4..8, 8..10]);
        assert_eq!(conformer_batches(1, 4).unwrap(), vec![0..1]);
        let b = conformer_batches(200, 7).unwrap();
        assert_eq!(b.len(), 29);
        assert_eq!(b.last().unwrap().len(), 4);
        assert!(conformer_batches(3, 0).is_err());
    }

    #[test]
    fn sampler_requires_both_classes() {
        assert!(matches!(
            BalancedSampler::new(&[true, true], 0),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn sampler_is_deterministic() {
        let labels: Vec<bool> = (0..20).map(|i| i % 5 == 0).collect();
        let a: Vec<_> = BalancedSampler::new(&labels, 9).unwrap().take(100).collect();
        let b: Vec<_> = BalancedSampler::new(&labels, 9).unwrap().take(100).collect();
        assert_eq!(a, b);
    }
}
