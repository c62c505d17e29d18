//! Ranking metrics for virtual screening and their spread across models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// False-positive rates at which enrichment is reported.
pub const ROCE_FPRS: [f64; 4] = [0.005, 0.01, 0.02, 0.05];

/// Map key for an FPR, e.g. `"0.5%"`.
pub fn roce_key(fpr: f64) -> String {
    format!("{}%", fpr * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub roc_auc: f64,
    pub prc_auc: f64,
    /// Keyed by [`roce_key`].
    pub roce: BTreeMap<String, f64>,
    /// Standard deviation of each field across models, when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<Box<MetricsReport>>,
}

impl MetricsReport {
    pub fn roce_at(&self, fpr: f64) -> Option<f64> {
        self.roce.get(&roce_key(fpr)).copied()
    }

    fn fields(&self) -> Vec<f64> {
        let mut v = vec![self.roc_auc, self.prc_auc];
        v.extend(ROCE_FPRS.iter().map(|f| self.roce_at(*f).unwrap_or(f64::NAN)));
        v
    }

    fn from_fields(v: &[f64]) -> Self {
        MetricsReport {
            roc_auc: v[0],
            prc_auc: v[1],
            roce: ROCE_FPRS.iter().zip(&v[2..]).map(|(f, x)| (roce_key(*f), *x)).collect(),
            uncertainty: None,
        }
    }
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{pos} hits and {neg} misses")));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Runs of tied scores along `order` as `(hits, misses)` per run.
fn tied_groups(scores: &[f64], labels: &[bool], order: &[usize]) -> Vec<(usize, usize)> {
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &i in order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed");
        if labels[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Mann–Whitney estimate with average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision, treating tied scores as one threshold.
pub fn prc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let order = descending(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut weighted = 0.0;
    for (h, m) in tied_groups(scores, labels, &order) {
        tp += h;
        fp += m;
        if h > 0 {
            weighted += h as f64 * tp as f64 / (tp + fp) as f64;
        }
    }
    Ok(weighted / pos as f64)
}

/// Empirical ROC curve points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check(scores, labels)?;
    let order = descending(scores);
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (h, m) in tied_groups(scores, labels, &order) {
        tp += h;
        fp += m;
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(pts)
}

/// TPR at `fpr`, linearly interpolated on a ROC curve.
///
/// Uses the highest point with FPR ≤ `fpr` and the first point beyond it.
pub fn interpolated_tpr(curve: &[(f64, f64)], fpr: f64) -> f64 {
    let below = curve.iter().rposition(|p| p.0 <= fpr).unwrap_or(0);
    let (x0, y0) = curve[below];
    match curve[below + 1..].iter().find(|p| p.0 > fpr) {
        Some(&(x1, y1)) => y0 + (y1 - y0) * (fpr - x0) / (x1 - x0),
        None => y0,
    }
}

/// ROC enrichment `TPR(f) / f`.
pub fn roce(scores: &[f64], labels: &[bool], fpr: f64) -> Result<f64> {
    if !(fpr > 0.0 && fpr <= 1.0) {
        return Err(Error::invalid(format!("ROCE needs an FPR in (0, 1], got {fpr}")));
    }
    let curve = roc_curve(scores, labels)?;
    Ok(interpolated_tpr(&curve, fpr) / fpr)
}

pub fn evaluate_scores(scores: &[f64], labels: &[bool]) -> Result<MetricsReport> {
    let curve = roc_curve(scores, labels)?;
    Ok(MetricsReport {
        roc_auc: roc_auc(scores, labels)?,
        prc_auc: prc_auc(scores, labels)?,
        roce: ROCE_FPRS
            .iter()
            .map(|&f| (roce_key(f), interpolated_tpr(&curve, f) / f))
            .collect(),
        uncertainty: None,
    })
}

/// Mean report with the population standard deviation of every field
/// attached as `uncertainty`.
pub fn uncertainty(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.len() < 2 {
        return Err(Error::invalid("uncertainty needs at least two reports"));
    }
    let n = reports.len() as f64;
    let rows: Vec<Vec<f64>> = reports.iter().map(MetricsReport::fields).collect();
    let k = rows[0].len();
    // shifted by the first report so identical inputs give exactly zero spread
    let mean: Vec<f64> = (0..k)
        .map(|j| rows[0][j] + rows.iter().map(|r| r[j] - rows[0][j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..k)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    let mut out = MetricsReport::from_fields(&mean);
    out.uncertainty = Some(Box::new(MetricsReport::from_fields(&std)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranker() {
        let labels: Vec<bool> = (0..1000).map(|i| i < 10).collect();
        let scores: Vec<f64> = (0..1000).map(|i| -(i as f64)).collect();
        let r = evaluate_scores(&scores, &labels).unwrap();
        assert_eq!(r.roc_auc, 1.0);
        assert_eq!(r.prc_auc, 1.0);
        assert!((r.roce_at(0.005).unwrap() - 200.0).abs() < 1e-9);
        assert!((r.roce_at(0.05).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ties_get_average_rank() {
        let s = [0.5, 0.5, 0.5, 0.5];
        let l = [true, false, true, false];
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.5);
        assert_eq!(prc_auc(&s, &l).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn interpolation_from_origin() {
        // first achievable FPR is 0.5, so TPR(0.25) sits halfway to it
        let curve = [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)];
        assert_eq!(interpolated_tpr(&curve, 0.25), 0.5);
    }

    #[test]
    fn uncertainty_arithmetic() {
        let mk = |v: f64| MetricsReport::from_fields(&[v, v, v, v, v, v]);
        let u = uncertainty(&[mk(0.8), mk(0.9)]).unwrap();
        assert!((u.roc_auc - 0.85).abs() < 1e-12);
        assert!((u.uncertainty.as_ref().unwrap().roc_auc - 0.05).abs() < 1e-12);
        let same = uncertainty(&[mk(0.7), mk(0.7), mk(0.7)]).unwrap();
        assert_eq!(same.uncertainty.unwrap().prc_auc, 0.0);
        assert!(uncertainty(&[mk(0.1)]).is_err());
    }
}
