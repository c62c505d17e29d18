//! Generated datasets for tests, demos, and benchmarks.
//!
//! * [`random_molecules`]: small random trees with random conformers.
//! * [`separable_set`]: one fixed five-atom chain whose label is decided
//!   only by how close the two terminal atoms sit in the top conformer.
//! * [`planted_set`]: hits hide one shared compact conformer among
//!   extended decoys; misses have decoys only.

use std::f64::consts::PI;

use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AtomSpec, BondSpec, BondType, Conformer, Hybridization, MoleculeRecord};

const BOND_LENGTH: f64 = 1.5;

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Applies an independent random rotation and translation.
pub fn random_rigid_motion(coords: &[[f64; 3]], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let rot = Rotation3::from_euler_angles(
        rng.gen_range(-3.2..3.2),
        rng.gen_range(-1.6..1.6),
        rng.gen_range(-3.2..3.2),
    );
    let shift = Vector3::new(
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-5.0..5.0),
    );
    coords
        .iter()
        .map(|c| {
            let p = rot * Vector3::new(c[0], c[1], c[2]) + shift;
            [p.x, p.y, p.z]
        })
        .collect()
}

fn normalized_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w.sort_by(|a, b| b.total_cmp(a));
    w
}

/// `n` random molecules with 2..=`max_atoms` atoms arranged as a random
/// tree, each with 1..=`max_confs` conformers.
pub fn random_molecules(n: usize, max_atoms: usize, max_confs: usize, seed: u64) -> Vec<MoleculeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elements = [
        ("C", 12.011),
        ("N", 14.007),
        ("O", 15.999),
        ("S", 32.06),
        ("Cl", 35.45),
        ("Xe", 131.29),
    ];
    let hybs = [Hybridization::Sp, Hybridization::Sp2, Hybridization::Sp3];
    let types = [BondType::Single, BondType::Double, BondType::Aromatic];
    (0..n)
        .map(|i| {
            let n_atoms = rng.gen_range(2..=max_atoms.max(2));
            let parents: Vec<usize> = (1..n_atoms).map(|k| rng.gen_range(0..k)).collect();
            let mut bonds: Vec<BondSpec> = parents
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let mut b = BondSpec::single(p, k + 1);
                    b.bond_type = *types.choose(&mut rng).expect("nonempty");
                    b.conjugated = rng.gen_bool(0.3);
                    b.in_ring = rng.gen_bool(0.2);
                    b
                })
                .collect();
            bonds.shuffle(&mut rng);
            let mut degree = vec![0u32; n_atoms];
            for b in &bonds {
                degree[b.a] += 1;
                degree[b.b] += 1;
            }
            let atoms: Vec<AtomSpec> = (0..n_atoms)
                .map(|k| {
                    let (el, mass) = *elements.choose(&mut rng).expect("nonempty");
                    let mut a = AtomSpec::simple(el, mass, degree[k]);
                    a.formal_charge = rng.gen_range(-1..=1);
                    a.num_h = rng.gen_range(0..3);
                    a.hybridization = *hybs.choose(&mut rng).expect("nonempty");
                    a.aromatic = rng.gen_bool(0.3);
                    a
                })
                .collect();
            let n_confs = rng.gen_range(1..=max_confs.max(1));
            let weights = normalized_weights(n_confs, &mut rng);
            let conformers = weights
                .into_iter()
                .map(|w| {
                    let mut pos = vec![Vector3::zeros(); n_atoms];
                    for (k, &p) in parents.iter().enumerate() {
                        let len = rng.gen_range(1.1..1.7);
                        pos[k + 1] = pos[p] + random_unit(&mut rng) * len;
                    }
                    let coords: Vec<[f64; 3]> = pos.iter().map(|p| [p.x, p.y, p.z]).collect();
                    Conformer {
                        weight: w,
                        coords: random_rigid_motion(&coords, &mut rng),
                    }
                })
                .collect();
            MoleculeRecord {
                id: format!("rand{i:04}"),
                label: u8::from(rng.gen_bool(0.5)),
                scaffold_key: format!("scaffold{}", i % 7),
                atoms,
                bonds,
                conformers,
            }
        })
        .collect()
}

/// The fixed five-atom chain graph shared by the constructed sets.
fn chain_graph() -> (Vec<AtomSpec>, Vec<BondSpec>) {
    let atoms: Vec<AtomSpec> = (0..5)
        .map(|k| {
            let deg = if k == 0 || k == 4 { 1 } else { 2 };
            let mut a = AtomSpec::simple("C", 12.011, deg);
            a.num_h = 4 - deg;
            a.hybridization = Hybridization::Sp3;
            a
        })
        .collect();
    let bonds = (0..4).map(|k| BondSpec::single(k, k + 1)).collect();
    (atoms, bonds)
}

/// Chain coordinates whose terminal atoms sit `d04` apart; `twist` turns
/// the last atom about the 0–3 axis without changing `d04`.
fn chain_coords(d04: f64, twist: f64, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let a3: Vector3<f64> = Vector3::new(3.75, 1.3, 0.0);
    let r: f64 = a3.norm();
    let cos_phi: f64 = ((r * r + BOND_LENGTH * BOND_LENGTH - d04 * d04) / (2.0 * BOND_LENGTH * r)).clamp(-1.0, 1.0);
    let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
    let back = -a3 / r;
    let e1 = Vector3::new(0.0, 0.0, 1.0);
    let e2 = back.cross(&e1);
    let u = back * cos_phi + (e1 * twist.cos() + e2 * twist.sin()) * sin_phi;
    let a4 = a3 + u * BOND_LENGTH;
    let mut coords = vec![
        [0.0, 0.0, 0.0],
        [1.5, 0.0, 0.0],
        [2.25, 1.3, 0.0],
        [a3.x, a3.y, a3.z],
        [a4.x, a4.y, a4.z],
    ];
    for c in coords.iter_mut() {
        for x in c.iter_mut() {
            *x += rng.gen_range(-jitter..=jitter);
        }
    }
    random_rigid_motion(&coords, rng)
}

/// Terminal distance of hits in [`separable_set`].
pub const HIT_TERMINAL_DISTANCE: f64 = 3.0;
/// Terminal distance of misses in [`separable_set`].
pub const MISS_TERMINAL_DISTANCE: f64 = 4.6;

/// `n` species (half hits) sharing one graph; the top-weight conformer
/// puts the terminal atoms 3.0 Å apart for hits and 4.6 Å for misses.
/// Lower-weight conformers are random. Every species has its own scaffold.
pub fn separable_set(n: usize, n_confs: usize, seed: u64) -> Vec<MoleculeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (atoms, bonds) = chain_graph();
    (0..n)
        .map(|i| {
            let hit = i % 2 == 0;
            let weights = normalized_weights(n_confs.max(1), &mut rng);
            let conformers = weights
                .into_iter()
                .enumerate()
                .map(|(k, w)| {
                    let d = if k == 0 {
                        if hit {
                            HIT_TERMINAL_DISTANCE
                        } else {
                            MISS_TERMINAL_DISTANCE
                        }
                    } else {
                        rng.gen_range(2.8..5.0)
                    };
                    let twist = rng.gen_range(-PI..PI);
                    Conformer {
                        weight: w,
                        coords: chain_coords(d, twist, 0.02, &mut rng),
                    }
                })
                .collect();
            MoleculeRecord {
                id: format!("sep{i:03}"),
                label: u8::from(hit),
                scaffold_key: format!("scaf{i:03}"),
                atoms: atoms.clone(),
                bonds: bonds.clone(),
                conformers,
            }
        })
        .collect()
}

/// Terminal distance of the planted compact conformer.
pub const PLANTED_TERMINAL_DISTANCE: f64 = 2.6;

/// `n` species (half hits) with `n_confs` conformers each. Every hit
/// carries one copy of a shared compact conformer (terminal distance
/// 2.6 Å, fixed twist) at a random position and weight; all other
/// conformers, and every conformer of a miss, are extended decoys with
/// terminal distance in 4.0–5.0 Å.
pub fn planted_set(n: usize, n_confs: usize, seed: u64) -> Vec<MoleculeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (atoms, bonds) = chain_graph();
    let n_confs = n_confs.max(2);
    (0..n)
        .map(|i| {
            let hit = i % 2 == 0;
            let planted = rng.gen_range(0..n_confs);
            let weights = normalized_weights(n_confs, &mut rng);
            let conformers = weights
                .into_iter()
                .enumerate()
                .map(|(k, w)| {
                    let coords = if hit && k == planted {
                        chain_coords(PLANTED_TERMINAL_DISTANCE, 0.5, 0.01, &mut rng)
                    } else {
                        let d = rng.gen_range(4.0..5.0);
                        chain_coords(d, rng.gen_range(-PI..PI), 0.01, &mut rng)
                    };
                    Conformer { weight: w, coords }
                })
                .collect();
            MoleculeRecord {
                id: format!("plant{i:03}"),
                label: u8::from(hit),
                scaffold_key: format!("scaf{i:03}"),
                atoms: atoms.clone(),
                bonds: bonds.clone(),
                conformers,
            }
        })
        .collect()
}
