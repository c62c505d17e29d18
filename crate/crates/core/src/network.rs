//! A complete predictor: message passing, conformer pooling, optional
//! extra molecule features, and the readout.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{conformer_batches, MoleculeRecord};
use crate::error::{Error, Result};
use crate::featurize::{featurize, whim_lite_vector, FeaturizedGraph, ZScaler};
use crate::models::{
    bond_states, chemprop2d_fingerprint, geometry_fingerprints, init_message_passing, init_readout, readout, Arch,
    GeometryBatch, ModelConfig,
};
use crate::params::{Forward, ParamStore};
use crate::pool::{attention_pool, avg_nbrs_geometry, init_pool, weighted_mean, PoolConfig, PoolKind};
use crate::tensor::{Tensor, Var};

/// Length of the conformer-ensemble shape feature vector (mean and std).
pub const WHIM_DIM: usize = 18;

/// Everything needed to rebuild a network's forward pass. Serialized as
/// the checkpoint header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub model: ModelConfig,
    pub pool: PoolConfig,
    /// When false the readout sees only the extra features.
    #[serde(default = "yes")]
    pub message_passing: bool,
    /// Standardizer for the shape features; required iff `model.whim`.
    #[serde(default)]
    pub whim_scaler: Option<ZScaler>,
    /// Width of a fixed per-molecule fingerprint supplied with each input
    /// (transfer learning); 0 for none.
    #[serde(default)]
    pub fixed_dim: usize,
    /// Conformers fingerprinted per pass.
    #[serde(default = "default_conformer_batch")]
    pub conformer_batch: usize,
}

fn yes() -> bool {
    true
}

fn default_conformer_batch() -> usize {
    7
}

impl NetworkSpec {
    pub fn new(model: ModelConfig, pool: PoolConfig) -> Self {
        NetworkSpec {
            model,
            pool,
            message_passing: true,
            whim_scaler: None,
            fixed_dim: 0,
            conformer_batch: default_conformer_batch(),
        }
    }

    /// Run label such as `CND (1-C)` or `CP3D (attention)`.
    pub fn display_name(&self) -> String {
        let arch = self.model.arch.short_name();
        let pool = match self.pool.kind {
            PoolKind::SingleConf => "1-C",
            PoolKind::LinearAttention => "linear attention",
            PoolKind::PairAttention => "attention",
            PoolKind::AvgNbrs => "avg nbrs",
            PoolKind::WeightedMean => "weighted mean",
        };
        let mut name = if self.message_passing {
            format!("{arch} ({pool})")
        } else {
            "fixed fingerprint".to_string()
        };
        if self.model.whim {
            name.push_str(" + WHIM-lite");
        }
        if self.fixed_dim > 0 && self.message_passing {
            name.push_str(" + fixed fingerprint");
        }
        name
    }

    /// Rejects inconsistent architecture, pooling, and feature choices.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pool.validate()?;
        if self.conformer_batch < 1 {
            return Err(Error::Config("conformer_batch must be ≥ 1".into()));
        }
        if self.model.arch == Arch::Chemprop2d && self.pool.kind == PoolKind::AvgNbrs {
            return Err(Error::Config(
                "avg_nbrs pooling needs distances; chemprop2d has none".into(),
            ));
        }
        if self.model.whim != self.whim_scaler.is_some() {
            return Err(Error::Config(
                "whim features need a fitted scaler and vice versa".into(),
            ));
        }
        if let Some(s) = &self.whim_scaler {
            if s.mean.len() != WHIM_DIM || s.std.len() != WHIM_DIM {
                return Err(Error::Config("whim scaler has the wrong width".into()));
            }
        }
        if self.readout_dim() == 0 {
            return Err(Error::Config("the readout has no inputs".into()));
        }
        Ok(())
    }

    /// Width of the message-passing (pooled) fingerprint.
    pub fn pooled_dim(&self) -> usize {
        if self.message_passing {
            self.pool.output_dim(self.model.hidden)
        } else {
            0
        }
    }

    /// Width of the readout input.
    pub fn readout_dim(&self) -> usize {
        self.pooled_dim() + if self.model.whim { WHIM_DIM } else { 0 } + self.fixed_dim
    }

    /// Fits the shape-feature scaler on `train` and turns `model.whim` on.
    pub fn fit_whim(&mut self, train: &[&MoleculeRecord]) -> Result<()> {
        let rows = train.iter().map(|r| whim_lite_vector(r)).collect::<Result<Vec<_>>>()?;
        self.whim_scaler = Some(ZScaler::fit(&rows)?);
        self.model.whim = true;
        Ok(())
    }
}

/// One molecule with everything the forward pass reads precomputed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub label: u8,
    pub graph: FeaturizedGraph,
    /// Conformer batches in stored order (empty for 2D models).
    pub batches: Vec<GeometryBatch>,
    /// Standardized shape features.
    pub whim: Option<Vec<f64>>,
    pub fixed: Option<Vec<f64>>,
}

impl Prepared {
    pub fn is_hit(&self) -> bool {
        self.label == 1
    }
}

/// Checkpoint header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: NetworkSpec,
    pub epoch: usize,
}

/// Network parameters plus the `NetworkSpec` that interprets them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

impl Network {
    /// Fresh parameters drawn from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        if spec.message_passing {
            init_message_passing(&spec.model, &mut params, &mut rng);
            init_pool(&spec.pool, spec.model.hidden, &mut params, &mut rng);
        }
        init_readout(&spec.model, spec.readout_dim(), &mut params, &mut rng);
        Ok(Network { spec, params })
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let header = CheckpointHeader {
            spec: self.spec.clone(),
            epoch,
        };
        self.params.write_checkpoint(path, &header)
    }

    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let (header, params): (CheckpointHeader, ParamStore) = ParamStore::read_checkpoint(path)?;
        header.spec.validate()?;
        let net = Network {
            spec: header.spec,
            params,
        };
        let fresh = Network::new(net.spec.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match net.params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("parameter {name} missing or mis-shaped"))),
            }
        }
        if fresh.params.len() != net.params.len() {
            return Err(Error::Checkpoint("checkpoint has unexpected parameters".into()));
        }
        Ok((net, header.epoch))
    }

    /// Featurizes `record` for this network. `fixed` must be given iff
    /// the `NetworkSpec` expects a fixed fingerprint.
    pub fn prepare(&self, record: &MoleculeRecord, fixed: Option<&[f64]>) -> Result<Prepared> {
        let spec = &self.spec;
        let mut graph = featurize(record, spec.model.cutoff)?;
        if graph.n_conformers() == 0 {
            return Err(Error::invalid(format!("molecule {} has no conformers", record.id)));
        }
        match spec.pool.kind {
            PoolKind::SingleConf => {
                graph = graph.with_geometries(vec![graph.geometries[0].clone()], vec![1.0]);
            }
            PoolKind::AvgNbrs => {
                graph = graph.with_geometries(vec![avg_nbrs_geometry(record, spec.model.cutoff)?], vec![1.0]);
            }
            _ => {}
        }
        let mut batches = Vec::new();
        if spec.message_passing && spec.model.arch.uses_geometry() {
            let basis = spec.model.basis()?;
            for range in conformer_batches(graph.n_conformers(), spec.conformer_batch)? {
                let geos: Vec<_> = graph.geometries[range].iter().collect();
                batches.push(GeometryBatch::new(&graph, &geos, &basis)?);
            }
        }
        let whim = match &spec.whim_scaler {
            Some(s) => Some(s.transform(&whim_lite_vector(record)?)),
            None => None,
        };
        let fixed = match (spec.fixed_dim, fixed) {
            (0, None) => None,
            (d, Some(v)) if v.len() == d && d > 0 => Some(v.to_vec()),
            (d, _) => {
                return Err(Error::invalid(format!(
                    "molecule {} needs a fixed fingerprint of width {d}",
                    record.id
                )))
            }
        };
        Ok(Prepared {
            id: record.id.clone(),
            label: record.label,
            graph,
            batches,
            whim,
            fixed,
        })
    }

    /// Per-conformer fingerprints (`N × F`).
    fn conformer_fingerprints(&self, fw: &mut Forward<'_>, mol: &Prepared) -> Result<Var> {
        let cfg = &self.spec.model;
        if cfg.arch == Arch::Chemprop2d {
            let h = chemprop2d_fingerprint(fw, cfg, &mol.graph)?;
            let n = mol.graph.n_conformers();
            return fw.graph.gather_rows(h, &vec![0; n]);
        }
        let bond_hidden = if cfg.arch == Arch::Cp3dNdu {
            Some(bond_states(fw, cfg, &mol.graph)?)
        } else {
            None
        };
        let mut parts = Vec::with_capacity(mol.batches.len());
        for b in &mol.batches {
            parts.push(geometry_fingerprints(fw, cfg, b, bond_hidden)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            fw.graph.concat_rows(&parts)
        }
    }

    /// Readout input (`1 × readout_dim`).
    pub fn molecule_fingerprint(&self, fw: &mut Forward<'_>, mol: &Prepared) -> Result<Var> {
        let spec = &self.spec;
        let mut parts = Vec::new();
        if spec.message_passing {
            let pooled = if spec.model.arch == Arch::Chemprop2d && !spec.pool.kind.is_attention() {
                // one fingerprint serves every conformer; the weights sum to 1
                chemprop2d_fingerprint(fw, &spec.model, &mol.graph)?
            } else {
                let h = self.conformer_fingerprints(fw, mol)?;
                match spec.pool.kind {
                    PoolKind::SingleConf | PoolKind::AvgNbrs => h,
                    PoolKind::WeightedMean => weighted_mean(fw, h, &mol.graph.weights)?,
                    PoolKind::LinearAttention | PoolKind::PairAttention => {
                        attention_pool(fw, &spec.pool, spec.model.activation(), h, &mol.graph.weights)?
                    }
                }
            };
            parts.push(pooled);
        }
        if let Some(w) = &mol.whim {
            parts.push(fw.constant(Tensor::row(w.clone())));
        }
        if let Some(f) = &mol.fixed {
            parts.push(fw.constant(Tensor::row(f.clone())));
        }
        let fp = if parts.len() == 1 {
            parts[0]
        } else {
            fw.graph.concat_cols(&parts)?
        };
        fw.last_fingerprint = Some(fw.graph.value(fp).clone());
        Ok(fp)
    }

    /// Hit probability (`1 × 1`).
    pub fn forward(&self, fw: &mut Forward<'_>, mol: &Prepared) -> Result<Var> {
        let fp = self.molecule_fingerprint(fw, mol)?;
        readout(fw, &self.spec.model, fp)
    }

    /// Inference-mode hit probability.
    pub fn predict(&self, mol: &Prepared) -> Result<f64> {
        let mut fw = Forward::inference(&self.params);
        let p = self.forward(&mut fw, mol)?;
        Ok(fw.graph.value(p).item())
    }

    /// Inference-mode readout input.
    pub fn fingerprint(&self, mol: &Prepared) -> Result<Vec<f64>> {
        let mut fw = Forward::inference(&self.params);
        let fp = self.molecule_fingerprint(&mut fw, mol)?;
        Ok(fw.graph.value(fp).data().to_vec())
    }

    /// Inference-mode attention coefficients, one tensor per head.
    pub fn attention(&self, mol: &Prepared) -> Result<Vec<Tensor>> {
        if !self.spec.pool.kind.is_attention() || !self.spec.message_passing {
            return Err(Error::invalid("network does not use attention pooling"));
        }
        let mut fw = Forward::inference(&self.params);
        self.molecule_fingerprint(&mut fw, mol)?;
        Ok(std::mem::take(&mut fw.attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn avg_nbrs_rejected_for_2d() {
        let spec = NetworkSpec::new(
            ModelConfig::new(Arch::Chemprop2d, 4),
            PoolConfig::new(PoolKind::AvgNbrs),
        );
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn display_names() {
        let spec = NetworkSpec::new(
            ModelConfig::new(Arch::Cp3dNdu, 4),
            PoolConfig::new(PoolKind::SingleConf),
        );
        assert_eq!(spec.display_name(), "CND (1-C)");
    }

    #[test]
    fn batching_does_not_change_prediction() {
        let records = synthetic::random_molecules(3, 6, 5, 11);
        let model = ModelConfig::new(Arch::Chemprop3d, 5);
        let mut spec = NetworkSpec::new(model, PoolConfig::new(PoolKind::PairAttention));
        let net = Network::new(spec.clone(), 1).unwrap();
        spec.conformer_batch = 2;
        let split = Network {
            spec,
            params: net.params.clone(),
        };
        for r in &records {
            let a = net.predict(&net.prepare(r, None).unwrap()).unwrap();
            let b = split.predict(&split.prepare(r, None).unwrap()).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = NetworkSpec::new(
            ModelConfig::new(Arch::SchNetFeatures, 3),
            PoolConfig::new(PoolKind::LinearAttention),
        );
        let net = Network::new(spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        net.save(&path, 7).unwrap();
        let (back, epoch) = Network::load(&path).unwrap();
        assert_eq!(epoch, 7);
        assert_eq!(back, net);
    }

    #[test]
    fn fixed_width_is_enforced() {
        let mut spec = NetworkSpec::new(ModelConfig::new(Arch::Chemprop2d, 3), PoolConfig::default());
        spec.message_passing = false;
        spec.fixed_dim = 4;
        let net = Network::new(spec, 0).unwrap();
        let r = &synthetic::random_molecules(1, 4, 1, 2)[0];
        assert!(net.prepare(r, Some(&[1.0; 3])).is_err());
        assert!(net.prepare(r, None).is_err());
        let mol = net.prepare(r, Some(&[1.0; 4])).unwrap();
        assert_eq!(net.fingerprint(&mol).unwrap(), vec![1.0; 4]);
    }
}
