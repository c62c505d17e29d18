//! Python bindings for the `confmpnn` library.
//!
//! Build with `maturin develop --features extension-module` (or
//! `cargo build --features extension-module` and copy the shared library
//! next to your script as `confmpnn_py.so`).

use std::collections::BTreeMap;
use std::path::PathBuf;

use confmpnn::data::{self, FilterConfig, MoleculeRecord, Split};
use confmpnn::metrics::{self, MetricsReport};
use confmpnn::models::{Arch, ModelConfig};
use confmpnn::network::{Network as CoreNetwork, NetworkSpec};
use confmpnn::pool::{self, PoolConfig, PoolKind};
use confmpnn::train::{self, TrainConfig};
use confmpnn::{featurize, synthetic, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for confmpnn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// A list of filtered molecule records.
#[pyclass(module = "confmpnn_py")]
struct Dataset {
    records: Vec<MoleculeRecord>,
}

impl Dataset {
    fn find(&self, id: &str) -> PyResult<&MoleculeRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| PyValueError::new_err(format!("no species {id:?}")))
    }

    fn refs(&self) -> Vec<&MoleculeRecord> {
        self.records.iter().collect()
    }
}

#[pymethods]
impl Dataset {
    /// Parses and filters JSON Lines text. Returns the dataset and a list
    /// of `(id, rule)` rejections.
    #[staticmethod]
    #[pyo3(signature = (text, max_atoms=100, max_confs=200, cutoff=5.0))]
    fn from_jsonl(
        text: &str,
        max_atoms: usize,
        max_confs: usize,
        cutoff: f64,
    ) -> PyResult<(Dataset, Vec<(String, String)>)> {
        let report = data::ingest_str(
            text,
            &FilterConfig {
                max_atoms,
                max_confs,
                cutoff,
            },
        )
        .py()?;
        Ok(split_report(report))
    }

    /// Generated dataset: `kind` is `separable`, `planted`, or `random`.
    #[staticmethod]
    #[pyo3(signature = (kind, n=32, confs=3, seed=0))]
    fn synthetic(kind: &str, n: usize, confs: usize, seed: u64) -> PyResult<Dataset> {
        let records = match kind {
            "separable" => synthetic::separable_set(n, confs, seed),
            "planted" => synthetic::planted_set(n, confs, seed),
            "random" => synthetic::random_molecules(n, 8, confs, seed),
            other => return Err(PyValueError::new_err(format!("unknown synthetic kind {other:?}"))),
        };
        Ok(Dataset { records })
    }

    fn to_jsonl(&self) -> PyResult<String> {
        data::to_jsonl(&self.records).py()
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Conformer weights of one species, highest first.
    fn weights(&self, id: &str) -> PyResult<Vec<f64>> {
        Ok(self.find(id)?.weights())
    }

    /// Species assigned to `split` by `assignment` (from [`scaffold_split`]).
    fn subset(&self, assignment: BTreeMap<String, String>, split: &str) -> PyResult<Dataset> {
        let want: Split = split.parse().py()?;
        let mut records = Vec::new();
        for r in &self.records {
            let s = assignment
                .get(&r.id)
                .ok_or_else(|| PyValueError::new_err(format!("species {:?} has no split", r.id)))?;
            if s.parse::<Split>().py()? == want {
                records.push(r.clone());
            }
        }
        Ok(Dataset { records })
    }

    /// Conformer-weighted WHIM-lite mean and standard deviation (9 + 9 values).
    fn whim_lite(&self, id: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let (m, s) = featurize::whim_lite(self.find(id)?).py()?;
        Ok((m.to_vec(), s.to_vec()))
    }

    /// Weight-averaged interatomic distance matrix.
    fn average_distances(&self, id: &str) -> PyResult<Vec<Vec<f64>>> {
        let t = pool::average_distances(self.find(id)?).py()?;
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    fn __repr__(&self) -> String {
        let hits = self.records.iter().filter(|r| r.is_hit()).count();
        format!("Dataset({} species, {hits} hits)", self.records.len())
    }
}

fn split_report(report: data::IngestReport) -> (Dataset, Vec<(String, String)>) {
    let rejected = report
        .rejections
        .into_iter()
        .map(|r| {
            let rule = serde_json::to_value(r.rule)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string));
            (r.id, rule.unwrap_or_default())
        })
        .collect();
    (
        Dataset {
            records: report.records,
        },
        rejected,
    )
}

/// Reads and filters a JSON Lines dataset file.
#[pyfunction]
#[pyo3(signature = (path, max_atoms=100, max_confs=200, cutoff=5.0))]
fn ingest(
    path: PathBuf,
    max_atoms: usize,
    max_confs: usize,
    cutoff: f64,
) -> PyResult<(Dataset, Vec<(String, String)>)> {
    let report = data::ingest(
        &path,
        &FilterConfig {
            max_atoms,
            max_confs,
            cutoff,
        },
    )
    .py()?;
    Ok(split_report(report))
}

/// Species id → `"train"`, `"validation"`, or `"test"`.
#[pyfunction]
#[pyo3(signature = (dataset, fractions=(0.6, 0.2, 0.2)))]
fn scaffold_split(dataset: &Dataset, fractions: (f64, f64, f64)) -> PyResult<BTreeMap<String, String>> {
    let s = data::scaffold_split(&dataset.records, [fractions.0, fractions.1, fractions.2], 0).py()?;
    Ok(s.assignment
        .into_iter()
        .map(|(id, sp)| (id, sp.name().to_string()))
        .collect())
}

fn labels_of(labels: &[u8]) -> Vec<bool> {
    labels.iter().map(|l| *l != 0).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("roc_auc", r.roc_auc)?;
    d.set_item("prc_auc", r.prc_auc)?;
    d.set_item("roce", r.roce.clone())?;
    if let Some(u) = &r.uncertainty {
        d.set_item("uncertainty", report_dict(py, u)?)?;
    }
    Ok(d)
}

/// ROC-AUC, PRC-AUC and ROCE at 0.5, 1, 2 and 5 % false-positive rate.
#[pyfunction]
fn evaluate_scores<'py>(py: Python<'py>, scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::evaluate_scores(&scores, &labels_of(&labels)).py()?;
    report_dict(py, &r)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels_of(&labels)).py()
}

#[pyfunction]
fn prc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::prc_auc(&scores, &labels_of(&labels)).py()
}

#[pyfunction]
fn roce(scores: Vec<f64>, labels: Vec<u8>, fpr: f64) -> PyResult<f64> {
    metrics::roce(&scores, &labels_of(&labels), fpr).py()
}

/// A fingerprinting model, conformer pooling, and readout.
#[pyclass(module = "confmpnn_py")]
struct Network {
    inner: CoreNetwork,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (arch="cp3d_ndu", pool="single_conf", hidden=300, heads=1, seed=0))]
    fn new(arch: &str, pool: &str, hidden: usize, heads: usize, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().py()?;
        let kind: PoolKind = pool.parse().py()?;
        let spec = NetworkSpec::new(
            ModelConfig::new(arch, hidden),
            PoolConfig {
                heads,
                ..PoolConfig::new(kind)
            },
        );
        Ok(Network {
            inner: CoreNetwork::new(spec, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Network {
            inner: CoreNetwork::load(&path).py()?.0,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, 0).py()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.spec.display_name()
    }

    /// Trains in place on `train`, monitoring `val`; the network keeps the
    /// parameters of the final epoch. Returns the per-epoch log.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (train, val, max_epochs=500, lr0=1e-4, seed=0, out_dir=None))]
    fn train(
        &mut self,
        py: Python<'_>,
        train: &Dataset,
        val: &Dataset,
        max_epochs: usize,
        lr0: f64,
        seed: u64,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Vec<Py<PyDict>>> {
        let cfg = TrainConfig {
            max_epochs,
            lr0,
            seed,
            ..Default::default()
        };
        let t = train::prepare_all(&self.inner, &train.refs()).py()?;
        let v = train::prepare_all(&self.inner, &val.refs()).py()?;
        let out = train::train(self.inner.clone(), &t, &v, &cfg, out_dir.as_deref()).py()?;
        self.inner = out.last;
        out.log
            .iter()
            .map(|row| {
                let d = PyDict::new(py);
                d.set_item("epoch", row.epoch)?;
                d.set_item("lr", row.lr)?;
                d.set_item("train_loss", row.train_loss)?;
                d.set_item("val_loss", row.val_loss)?;
                d.set_item("val_roc", row.val_roc)?;
                d.set_item("val_prc", row.val_prc)?;
                Ok(d.unbind())
            })
            .collect()
    }

    /// Hit probability of every species, in dataset order.
    fn predict(&self, dataset: &Dataset) -> PyResult<Vec<f64>> {
        let mols = train::prepare_all(&self.inner, &dataset.refs()).py()?;
        train::predict_all(&self.inner, &mols).py()
    }

    /// Readout input of every species, in dataset order.
    fn fingerprints(&self, dataset: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let mols = train::prepare_all(&self.inner, &dataset.refs()).py()?;
        mols.iter().map(|m| self.inner.fingerprint(m).py()).collect()
    }

    /// Attention coefficients per head for one species (rows of α).
    fn attention(&self, dataset: &Dataset, id: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let mol = self.inner.prepare(dataset.find(id)?, None).py()?;
        let heads = self.inner.attention(&mol).py()?;
        Ok(heads
            .iter()
            .map(|t| (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
            .collect())
    }

    /// ROC-AUC, PRC-AUC and ROCE on `dataset`.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let mols = train::prepare_all(&self.inner, &dataset.refs()).py()?;
        report_dict(py, &train::evaluate(&self.inner, &mols).py()?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network({}, {} parameters)",
            self.inner.spec.display_name(),
            self.inner.params.numel()
        )
    }
}

#[pymodule]
fn confmpnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(ingest, m)?)?;
    m.add_function(wrap_pyfunction!(scaffold_split, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_scores, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(prc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(roce, m)?)?;
    Ok(())
}
