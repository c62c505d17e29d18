//! Helpers shared by the integration and acceptance tests: finite
//! difference checks, symmetry transforms, and a brute-force metric
//! oracle written independently of the library's metric code.

#![allow(dead_code)]

use std::collections::BTreeMap;

use confmpnn::data::MoleculeRecord;
use confmpnn::network::{Network, Prepared};
use confmpnn::params::Forward;
use confmpnn::synthetic::random_rigid_motion;
use confmpnn::tensor::gradcheck::relative_error;
use confmpnn::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// BCE of one species, recomputed without a tape.
pub fn loss_of(net: &Network, mol: &Prepared) -> f64 {
    loss_and_kinks(net, mol).0
}

/// BCE plus the sign pattern of every ReLU-family input.
pub fn loss_and_kinks(net: &Network, mol: &Prepared) -> (f64, Vec<bool>) {
    let mut fw = Forward::inference(&net.params);
    fw.graph.track_kinks();
    let p = net.forward(&mut fw, mol).unwrap();
    let p = fw.graph.value(p).item();
    let loss = confmpnn::train::bce_loss(p, f64::from(mol.label));
    (loss, fw.graph.kink_pattern().to_vec())
}

/// Analytic BCE gradient for every parameter (zeros for untouched ones).
pub fn analytic_grads(net: &Network, mol: &Prepared) -> BTreeMap<String, Tensor> {
    let mut fw = Forward::eval_with_grad(&net.params);
    let p = net.forward(&mut fw, mol).unwrap();
    let loss = fw.graph.bce(p, &[f64::from(mol.label)]).unwrap();
    let grads = fw.graph.backward(loss).unwrap();
    let mut out = fw.param_grads(&grads);
    for (name, t) in net.params.iter() {
        out.entry(name.to_string()).or_insert_with(|| {
            let (r, c) = t.dims();
            Tensor::zeros(r, c)
        });
    }
    out
}

/// Central differences for every parameter entry.
pub struct NumericGrads {
    pub grads: BTreeMap<String, Tensor>,
    /// `(parameter, flat index)` of entries whose stencil crossed a
    /// ReLU kink; their slot in `grads` is NaN.
    pub straddled: Vec<(String, usize)>,
}

/// Central-difference gradient of the BCE for every parameter entry.
/// Entries where the `+h` and `-h` evaluations take different ReLU
/// branches are marked rather than differenced, since the loss is not
/// differentiable across that interval.
pub fn numeric_grads(net: &Network, mol: &Prepared) -> NumericGrads {
    let mut work = net.clone();
    let names: Vec<String> = net.params.names().map(str::to_string).collect();
    let mut grads = BTreeMap::new();
    let mut straddled = Vec::new();
    for name in names {
        let (r, c) = net.params.get(&name).unwrap().dims();
        let mut g = Tensor::zeros(r, c);
        for i in 0..r * c {
            let orig = work.params.get(&name).unwrap().data()[i];
            work.params.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let (up, k_up) = loss_and_kinks(&work, mol);
            work.params.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let (down, k_down) = loss_and_kinks(&work, mol);
            work.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            if k_up == k_down {
                g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
            } else {
                g.data_mut()[i] = f64::NAN;
                straddled.push((name.clone(), i));
            }
        }
        grads.insert(name, g);
    }
    NumericGrads { grads, straddled }
}

/// Largest per-parameter relative error between analytic and numeric
/// gradients, the parameter it occurred in, and how many entries were
/// skipped for straddling a kink.
pub fn worst_gradient_error(net: &Network, mol: &Prepared) -> (f64, String, usize) {
    let a = analytic_grads(net, mol);
    let n = numeric_grads(net, mol);
    let mut worst = (0.0, String::new(), n.straddled.len());
    for (name, ga) in &a {
        let gn = &n.grads[name];
        let keep: Vec<usize> = (0..gn.data().len()).filter(|i| !gn.data()[*i].is_nan()).collect();
        let pick = |t: &Tensor| Tensor::row(keep.iter().map(|i| t.data()[*i]).collect());
        let e = if keep.is_empty() {
            0.0
        } else {
            relative_error(&pick(ga), &pick(gn))
        };
        if e > worst.0 {
            worst.0 = e;
            worst.1 = name.clone();
        }
    }
    worst
}

/// Same molecule with atoms renumbered: new atom `k` is old atom `perm[k]`.
pub fn permute_atoms(r: &MoleculeRecord, perm: &[usize]) -> MoleculeRecord {
    let mut inv = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut out = r.clone();
    out.atoms = perm.iter().map(|&o| r.atoms[o].clone()).collect();
    for b in &mut out.bonds {
        b.a = inv[b.a];
        b.b = inv[b.b];
    }
    for (c, orig) in out.conformers.iter_mut().zip(&r.conformers) {
        c.coords = perm.iter().map(|&o| orig.coords[o]).collect();
    }
    out
}

pub fn random_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Independent random rigid motion of every conformer.
pub fn move_each_conformer(r: &MoleculeRecord, rng: &mut ChaCha8Rng) -> MoleculeRecord {
    let mut out = r.clone();
    for c in &mut out.conformers {
        c.coords = random_rigid_motion(&c.coords, rng);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Brute-force metrics: enumerate every threshold `t` and classify
/// `score ≥ t` as positive.
pub mod oracle {
    fn confusion(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            if *s >= t {
                if *l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        (tp, fp)
    }

    /// `(fpr, tpr, precision)` for every threshold, strictest first,
    /// starting from the empty prediction set.
    fn points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64, f64)> {
        let pos = labels.iter().filter(|l| **l).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ts.dedup();
        let mut out = vec![(0.0, 0.0, 1.0)];
        for t in ts {
            let (tp, fp) = confusion(scores, labels, t);
            out.push((fp / neg, tp / pos, tp / (tp + fp)));
        }
        out
    }

    /// Trapezoidal area under the threshold ROC curve.
    pub fn roc_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let p = points(scores, labels);
        p.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    /// Σ (R_k − R_{k−1}) P_k over thresholds.
    pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
        let p = points(scores, labels);
        p.windows(2).map(|w| (w[1].1 - w[0].1) * w[1].2).sum()
    }

    /// TPR(f)/f with linear interpolation between the best point at
    /// FPR ≤ f and the lowest point at the next larger FPR.
    pub fn roce(scores: &[f64], labels: &[bool], f: f64) -> f64 {
        let p = points(scores, labels);
        let x0 = p
            .iter()
            .map(|q| q.0)
            .filter(|x| *x <= f)
            .fold(f64::NEG_INFINITY, f64::max);
        let y0 = p
            .iter()
            .filter(|q| q.0 == x0)
            .map(|q| q.1)
            .fold(f64::NEG_INFINITY, f64::max);
        let above: Vec<_> = p.iter().filter(|q| q.0 > f).collect();
        let tpr = if above.is_empty() {
            y0
        } else {
            let x1 = above.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
            let y1 = above
                .iter()
                .filter(|q| q.0 == x1)
                .map(|q| q.1)
                .fold(f64::INFINITY, f64::min);
            y0 + (y1 - y0) * (f - x0) / (x1 - x0)
        };
        tpr / f
    }
}
