//! Numeric graph features: one-hot atom and bond vectors, Gaussian
//! distance expansion, cutoff neighbor lists, and the weighted-covariance
//! shape descriptor ("WHIM-lite").

use std::cmp::Ordering;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{distance, AtomSpec, BondSpec, BondStereo, BondType, Chirality, Hybridization, MoleculeRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ELEMENTS: [&str; 10] = ["H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I"];
const MAX_DEGREE: usize = 5;
const CHARGES: [i32; 5] = [-2, -1, 0, 1, 2];
const MAX_NUM_H: usize = 4;

const ELEMENT_BLOCK: usize = ELEMENTS.len() + 1;
const DEGREE_BLOCK: usize = MAX_DEGREE + 2;
const CHARGE_BLOCK: usize = CHARGES.len() + 1;
const CHIRALITY_BLOCK: usize = 4;
const NUM_H_BLOCK: usize = MAX_NUM_H + 2;
const HYBRIDIZATION_BLOCK: usize = 6;
const AROMATIC_BLOCK: usize = 2;

/// Length of an atom feature vector.
pub const ATOM_FDIM: usize = ELEMENT_BLOCK
    + DEGREE_BLOCK
    + CHARGE_BLOCK
    + CHIRALITY_BLOCK
    + NUM_H_BLOCK
    + HYBRIDIZATION_BLOCK
    + AROMATIC_BLOCK
    + 1;

/// Length of a bond feature vector: type(4) + conjugated + ring + stereo(6).
pub const BOND_FDIM: usize = 4 + 1 + 1 + 6;

/// Offsets of each block inside the atom vector.
pub mod atom_offsets {
    use super::*;
    pub const ELEMENT: usize = 0;
    pub const DEGREE: usize = ELEMENT + ELEMENT_BLOCK;
    pub const CHARGE: usize = DEGREE + DEGREE_BLOCK;
    pub const CHIRALITY: usize = CHARGE + CHARGE_BLOCK;
    pub const NUM_H: usize = CHIRALITY + CHIRALITY_BLOCK;
    pub const HYBRIDIZATION: usize = NUM_H + NUM_H_BLOCK;
    pub const AROMATIC: usize = HYBRIDIZATION + HYBRIDIZATION_BLOCK;
    pub const MASS: usize = AROMATIC + AROMATIC_BLOCK;
}

/// Concatenated one-hot blocks; unknown categories land in each block's
/// trailing "other" slot. Mass is a single `mass / 100` value.
pub fn atom_features(atom: &AtomSpec) -> Vec<f64> {
    use atom_offsets as o;
    let mut v = vec![0.0; ATOM_FDIM];
    let el = ELEMENTS
        .iter()
        .position(|e| *e == atom.element)
        .unwrap_or(ELEMENTS.len());
    v[o::ELEMENT + el] = 1.0;
    v[o::DEGREE + (atom.degree as usize).min(MAX_DEGREE + 1)] = 1.0;
    let ch = CHARGES
        .iter()
        .position(|c| *c == atom.formal_charge)
        .unwrap_or(CHARGES.len());
    v[o::CHARGE + ch] = 1.0;
    let chir = match atom.chirality {
        Chirality::None => 0,
        Chirality::Clockwise => 1,
        Chirality::CounterClockwise => 2,
        Chirality::Other => 3,
    };
    v[o::CHIRALITY + chir] = 1.0;
    v[o::NUM_H + (atom.num_h as usize).min(MAX_NUM_H + 1)] = 1.0;
    let hyb = match atom.hybridization {
        Hybridization::Sp => 0,
        Hybridization::Sp2 => 1,
        Hybridization::Sp3 => 2,
        Hybridization::Sp3d => 3,
        Hybridization::Sp3d2 => 4,
        Hybridization::Other => 5,
    };
    v[o::HYBRIDIZATION + hyb] = 1.0;
    v[o::AROMATIC + usize::from(atom.aromatic)] = 1.0;
    v[o::MASS] = atom.mass / 100.0;
    v
}

/// Bond type, conjugated flag, ring flag, stereo one-hot. The all-zero
/// vector is reserved for non-bonded pairs.
pub fn bond_features(bond: &BondSpec) -> Vec<f64> {
    let mut v = vec![0.0; BOND_FDIM];
    let t = match bond.bond_type {
        BondType::Single => 0,
        BondType::Double => 1,
        BondType::Triple => 2,
        BondType::Aromatic => 3,
    };
    v[t] = 1.0;
    v[4] = f64::from(u8::from(bond.conjugated));
    v[5] = f64::from(u8::from(bond.in_ring));
    let s = match bond.stereo {
        BondStereo::None => 0,
        BondStereo::Any => 1,
        BondStereo::E => 2,
        BondStereo::Z => 3,
        BondStereo::Cis => 4,
        BondStereo::Trans => 5,
    };
    v[6 + s] = 1.0;
    v
}

pub fn no_bond_features() -> Vec<f64> {
    vec![0.0; BOND_FDIM]
}

/// Gaussians with centers evenly spaced on `[0, r_cut]` and width equal to
/// the spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBasis {
    pub centers: Vec<f64>,
    pub width: f64,
    pub r_cut: f64,
}

impl GaussianBasis {
    pub fn new(n_gaussians: usize, r_cut: f64) -> Result<Self> {
        if n_gaussians < 2 || r_cut.partial_cmp(&0.0) != Some(Ordering::Greater) {
            return Err(Error::invalid(
                "gaussian basis needs ≥2 functions and a positive cutoff",
            ));
        }
        let width = r_cut / (n_gaussians - 1) as f64;
        let mut centers: Vec<f64> = (0..n_gaussians).map(|k| k as f64 * width).collect();
        centers[n_gaussians - 1] = r_cut;
        Ok(GaussianBasis { centers, width, r_cut })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// `g_k(r) = exp(-(r - c_k)² / 2σ²)`.
    pub fn expand(&self, r: f64) -> Result<Vec<f64>> {
        if !(0.0..=self.r_cut).contains(&r) {
            return Err(Error::invalid(format!("distance {r} outside [0, {}]", self.r_cut)));
        }
        let inv = 1.0 / (2.0 * self.width * self.width);
        Ok(self.centers.iter().map(|c| (-(r - c).powi(2) * inv).exp()).collect())
    }

    /// Expands every distance into a `len(dists) × n_gaussians` matrix.
    pub fn expand_all(&self, dists: &[f64]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(dists.len() * self.len());
        for &d in dists {
            data.extend(self.expand(d)?);
        }
        Tensor::matrix(dists.len(), self.len(), data)
    }
}

/// Directed pairs within the cutoff for one geometry, with distances.
///
/// Pairs come in reverse-adjacent order: entry `2k` is `(v, w)` with
/// `v < w` and entry `2k + 1` is `(w, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub pairs: Vec<(usize, usize)>,
    pub dists: Vec<f64>,
}

impl Geometry {
    /// Builds the geometry from any symmetric distance function.
    pub fn from_distances(n_atoms: usize, r_cut: f64, dist: impl Fn(usize, usize) -> f64) -> Self {
        let mut pairs = Vec::new();
        let mut dists = Vec::new();
        for v in 0..n_atoms {
            for w in v + 1..n_atoms {
                let d = dist(v, w);
                if d <= r_cut {
                    pairs.push((v, w));
                    pairs.push((w, v));
                    dists.push(d);
                    dists.push(d);
                }
            }
        }
        Geometry { pairs, dists }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn distance(&self, v: usize, w: usize) -> Option<f64> {
        self.pairs.iter().position(|p| *p == (v, w)).map(|i| self.dists[i])
    }
}

/// All directed pairs `(v, w)`, `v ≠ w`, with `d ≤ r_cut`.
pub fn neighbor_list(coords: &[[f64; 3]], r_cut: f64) -> Geometry {
    Geometry::from_distances(coords.len(), r_cut, |v, w| distance(&coords[v], &coords[w]))
}

/// A molecule ready for the models.
#[derive(Clone, Debug)]
pub struct FeaturizedGraph {
    pub id: String,
    pub n_atoms: usize,
    /// `n_atoms × ATOM_FDIM`
    pub x: Tensor,
    /// Directed bonded pairs; edges `2i` and `2i + 1` are the two
    /// directions of bond `i`.
    pub bonded: Vec<(usize, usize)>,
    /// `bonded.len() × BOND_FDIM`
    pub e_bond: Tensor,
    /// One cutoff neighbor list per conformer, in stored order.
    pub geometries: Vec<Geometry>,
    pub weights: Vec<f64>,
    bond_lookup: Vec<Option<usize>>,
}

impl FeaturizedGraph {
    /// Directed bonded edge index of `(v, w)`, if bonded.
    pub fn bond_edge(&self, v: usize, w: usize) -> Option<usize> {
        self.bond_lookup[v * self.n_atoms + w]
    }

    pub fn n_conformers(&self) -> usize {
        self.geometries.len()
    }

    /// Same graph with a replaced set of geometries and weights.
    pub fn with_geometries(&self, geometries: Vec<Geometry>, weights: Vec<f64>) -> Self {
        FeaturizedGraph {
            geometries,
            weights,
            ..self.clone()
        }
    }
}

/// Featurizes the molecular graph and every conformer's neighbor list.
pub fn featurize(record: &MoleculeRecord, r_cut: f64) -> Result<FeaturizedGraph> {
    let n = record.n_atoms();
    if n == 0 {
        return Err(Error::invalid(format!("molecule {} has no atoms", record.id)));
    }
    let x = Tensor::from_rows(&record.atoms.iter().map(atom_features).collect::<Vec<_>>())?;
    let mut bonded = Vec::with_capacity(2 * record.bonds.len());
    let mut rows = Vec::with_capacity(2 * record.bonds.len());
    let mut bond_lookup = vec![None; n * n];
    for b in &record.bonds {
        if b.a >= n || b.b >= n || b.a == b.b {
            return Err(Error::invalid(format!("invalid bond {}-{} in {}", b.a, b.b, record.id)));
        }
        let f = bond_features(b);
        for (v, w) in [(b.a, b.b), (b.b, b.a)] {
            bond_lookup[v * n + w] = Some(bonded.len());
            bonded.push((v, w));
            rows.push(f.clone());
        }
    }
    let e_bond = if rows.is_empty() {
        Tensor::zeros(0, BOND_FDIM)
    } else {
        Tensor::from_rows(&rows)?
    };
    let geometries = record
        .conformers
        .iter()
        .map(|c| neighbor_list(&c.coords, r_cut))
        .collect();
    Ok(FeaturizedGraph {
        id: record.id.clone(),
        n_atoms: n,
        x,
        bonded,
        e_bond,
        geometries,
        weights: record.weights(),
        bond_lookup,
    })
}

/// Eigenvalues (descending, clamped at 0) of the weighted coordinate
/// covariance. All-zero weights give a zero vector.
fn weighted_covariance_eigenvalues(coords: &[[f64; 3]], weights: &[f64]) -> [f64; 3] {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return [0.0; 3];
    }
    let mut center = Vector3::zeros();
    for (c, w) in coords.iter().zip(weights) {
        center += Vector3::new(c[0], c[1], c[2]) * *w;
    }
    center /= total;
    let mut cov = Matrix3::zeros();
    for (c, w) in coords.iter().zip(weights) {
        let d = Vector3::new(c[0], c[1], c[2]) - center;
        cov += d * d.transpose() * *w;
    }
    cov /= total;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [ev[0], ev[1], ev[2]]
}

/// Per-conformer 9-vector: covariance eigenvalues under mass, unit, and
/// |formal charge| atom weighting.
pub fn shape_descriptor(atoms: &[AtomSpec], coords: &[[f64; 3]]) -> [f64; 9] {
    let mass: Vec<f64> = atoms.iter().map(|a| a.mass).collect();
    let unit = vec![1.0; atoms.len()];
    let charge: Vec<f64> = atoms
        .iter()
        .map(|a| f64::from(a.formal_charge.unsigned_abs()))
        .collect();
    let mut out = [0.0; 9];
    for (k, w) in [mass, unit, charge].iter().enumerate() {
        out[3 * k..3 * k + 3].copy_from_slice(&weighted_covariance_eigenvalues(coords, w));
    }
    out
}

/// Conformer-weighted mean and standard deviation of the shape descriptor.
pub fn whim_lite(record: &MoleculeRecord) -> Result<([f64; 9], [f64; 9])> {
    if record.conformers.is_empty() {
        return Err(Error::invalid(format!("molecule {} has no conformers", record.id)));
    }
    let descs: Vec<[f64; 9]> = record
        .conformers
        .iter()
        .map(|c| shape_descriptor(&record.atoms, &c.coords))
        .collect();
    let total: f64 = record.conformers.iter().map(|c| c.weight).sum();
    let mut mean = [0.0; 9];
    for (d, c) in descs.iter().zip(&record.conformers) {
        for k in 0..9 {
            mean[k] += c.weight / total * d[k];
        }
    }
    let mut std = [0.0; 9];
    if descs.len() > 1 {
        for (d, c) in descs.iter().zip(&record.conformers) {
            for k in 0..9 {
                std[k] += c.weight / total * (d[k] - mean[k]).powi(2);
            }
        }
        std.iter_mut().for_each(|v| *v = v.sqrt());
    }
    Ok((mean, std))
}

/// `[mean ‖ std]` of [`whim_lite`].
pub fn whim_lite_vector(record: &MoleculeRecord) -> Result<Vec<f64>> {
    let (m, s) = whim_lite(record)?;
    Ok(m.iter().chain(s.iter()).copied().collect())
}

/// Column standardizer fit on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScaler {
    /// Population mean and standard deviation per column.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("cannot fit a scaler on zero rows"));
        };
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape {
                    op: "zscale",
                    lhs: vec![d],
                    rhs: vec![r.len()],
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in rows {
            for k in 0..d {
                std[k] += (r[k] - mean[k]).powi(2) / n;
            }
        }
        std.iter_mut().for_each(|v| *v = v.sqrt());
        let degenerate: Vec<usize> = (0..d).filter(|&k| std[k] == 0.0).collect();
        if !degenerate.is_empty() {
            log::warn!("zscale: columns {degenerate:?} have zero training variance and pass through unscaled");
        }
        Ok(ZScaler { mean, std })
    }

    /// Columns whose training σ was zero.
    pub fn degenerate(&self) -> Vec<usize> {
        (0..self.std.len()).filter(|&k| self.std[k] == 0.0).collect()
    }

    /// `(x - μ) / σ`, leaving zero-σ columns unchanged.
    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(k, &v)| {
                if self.std[k] == 0.0 {
                    v
                } else {
                    (v - self.mean[k]) / self.std[k]
                }
            })
            .collect()
    }
}
