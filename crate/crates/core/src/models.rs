//! Message-passing fingerprinters and the feed-forward readout.
//!
//! * `chemprop2d`: directed-edge MPNN over bonds.
//! * `schnetfeatures`: continuous-filter convolutions over cutoff pairs,
//!   with graph atom features and a bond channel concatenated onto the
//!   distance filter.
//! * `chemprop3d`: directed-edge MPNN over all cutoff pairs, hidden state
//!   initialized from separate distance and bond halves.
//! * `cp3d_ndu`: bonded-only directed updates, distance features joined
//!   after the last convolution.
//!
//! Row-vector convention: a learned map `W` is stored `fan_in × fan_out`
//! and applied as `x · W`.

use std::cmp::Ordering;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{FeaturizedGraph, GaussianBasis, Geometry, ATOM_FDIM, BOND_FDIM};
use crate::params::{init_linear, Forward, ParamStore};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "chemprop2d")]
    Chemprop2d,
    #[serde(rename = "schnetfeatures")]
    SchNetFeatures,
    #[serde(rename = "chemprop3d")]
    Chemprop3d,
    #[serde(rename = "cp3d_ndu")]
    Cp3dNdu,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Chemprop2d, Arch::SchNetFeatures, Arch::Chemprop3d, Arch::Cp3dNdu];

    pub fn default_convolutions(self) -> usize {
        match self {
            Arch::Chemprop2d | Arch::SchNetFeatures => 3,
            Arch::Chemprop3d | Arch::Cp3dNdu => 2,
        }
    }

    pub fn default_activation(self) -> Activation {
        match self {
            Arch::SchNetFeatures => Activation::ShiftedSoftplus,
            _ => Activation::Relu,
        }
    }

    pub fn uses_geometry(self) -> bool {
        self != Arch::Chemprop2d
    }

    /// Abbreviation used in run names.
    pub fn short_name(self) -> &'static str {
        match self {
            Arch::Chemprop2d => "ChemProp",
            Arch::SchNetFeatures => "SchNetFeat",
            Arch::Chemprop3d => "CP3D",
            Arch::Cp3dNdu => "CND",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Chemprop2d => "chemprop2d",
            Arch::SchNetFeatures => "schnetfeatures",
            Arch::Chemprop3d => "chemprop3d",
            Arch::Cp3dNdu => "cp3d_ndu",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    ShiftedSoftplus,
}

impl Activation {
    pub fn apply(self, fw: &mut Forward<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => fw.graph.relu(x),
            Activation::ShiftedSoftplus => fw.graph.shifted_softplus(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::ShiftedSoftplus => crate::tensor::shifted_softplus(x),
        }
    }
}

/// Architecture and its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden dimension F.
    pub hidden: usize,
    /// Number of convolutions T; the architecture default when unset.
    pub convolutions: Option<usize>,
    /// Å
    pub cutoff: f64,
    pub n_gaussians: usize,
    /// Hidden readout layers, each of width F.
    pub readout_layers: usize,
    pub dropout_conv: f64,
    pub dropout_readout: f64,
    /// Family default (ReLU for ChemProp-style, shifted softplus for SchNet) when unset.
    pub activation: Option<Activation>,
    /// Concatenate standardized conformer-ensemble shape descriptors to the fingerprint.
    pub whim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Cp3dNdu,
            hidden: 300,
            convolutions: None,
            cutoff: 5.0,
            n_gaussians: 10,
            readout_layers: 2,
            dropout_conv: 0.0,
            dropout_readout: 0.0,
            activation: None,
            whim: false,
        }
    }
}

impl ModelConfig {
    pub fn new(arch: Arch, hidden: usize) -> Self {
        ModelConfig {
            arch,
            hidden,
            ..Default::default()
        }
    }

    pub fn depth(&self) -> usize {
        self.convolutions.unwrap_or_else(|| self.arch.default_convolutions())
    }

    pub fn activation(&self) -> Activation {
        self.activation.unwrap_or_else(|| self.arch.default_activation())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden < 1 || self.depth() < 1 {
            return Err(Error::Config("hidden dimension and convolutions must be ≥ 1".into()));
        }
        for (name, r) in [
            ("dropout_conv", self.dropout_conv),
            ("dropout_readout", self.dropout_readout),
        ] {
            if !(0.0..=0.4).contains(&r) {
                return Err(Error::Config(format!("{name} = {r} outside [0, 0.4]")));
            }
        }
        if self.cutoff.partial_cmp(&0.0) != Some(Ordering::Greater) || self.n_gaussians < 2 {
            return Err(Error::Config("cutoff must be positive and n_gaussians ≥ 2".into()));
        }
        Ok(())
    }

    pub fn basis(&self) -> Result<GaussianBasis> {
        GaussianBasis::new(self.n_gaussians, self.cutoff)
    }
}

/// Parameters for the message-passing half of `cfg`, under prefix `mp.`.
pub fn init_message_passing(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let f = cfg.hidden;
    let g = cfg.n_gaussians;
    match cfg.arch {
        Arch::Chemprop2d => {
            store.init_weight("mp.W_i.w", ATOM_FDIM + BOND_FDIM, f, rng);
            store.init_weight("mp.W_m.w", f, f, rng);
            init_linear(store, "mp.W_a", ATOM_FDIM + f, f, rng);
        }
        Arch::Cp3dNdu => {
            store.init_weight("mp.W_i.w", ATOM_FDIM + BOND_FDIM, f, rng);
            store.init_weight("mp.W_m.w", f, f, rng);
            init_filter(store, "mp.filter", g, f, rng);
            init_linear(store, "mp.W_a", ATOM_FDIM + 2 * f, f, rng);
        }
        Arch::Chemprop3d => {
            store.init_weight("mp.W_i_dist.w", ATOM_FDIM + f, f, rng);
            store.init_weight("mp.W_i_bond.w", ATOM_FDIM + BOND_FDIM, f, rng);
            store.init_weight("mp.W_m.w", 2 * f, 2 * f, rng);
            init_filter(store, "mp.filter", g, f, rng);
            init_linear(store, "mp.W_a", ATOM_FDIM + 2 * f, f, rng);
        }
        Arch::SchNetFeatures => {
            init_linear(store, "mp.embed", ATOM_FDIM, f, rng);
            for t in 0..cfg.depth() {
                init_filter(store, &format!("mp.conv{t}.filter"), g, f, rng);
                init_linear(store, &format!("mp.conv{t}.bond"), BOND_FDIM, f, rng);
                store.init_weight(&format!("mp.conv{t}.J.w"), f, 2 * f, rng);
                store.init_weight(&format!("mp.conv{t}.I1.w"), 2 * f, f, rng);
                store.init_weight(&format!("mp.conv{t}.I2.w"), f, f, rng);
            }
        }
    }
}

fn init_filter(store: &mut ParamStore, prefix: &str, n_gaussians: usize, f: usize, rng: &mut ChaCha8Rng) {
    init_linear(store, &format!("{prefix}.1"), n_gaussians, f, rng);
    init_linear(store, &format!("{prefix}.2"), f, f, rng);
}

/// Readout parameters under prefix `readout.`.
pub fn init_readout(cfg: &ModelConfig, in_dim: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let mut d = in_dim;
    for l in 0..cfg.readout_layers {
        init_linear(store, &format!("readout.{l}"), d, cfg.hidden, rng);
        d = cfg.hidden;
    }
    init_linear(store, "readout.out", d, 1, rng);
}

/// Feed-forward readout: hidden layers with activation and dropout, then a
/// sigmoid output. `fingerprint` is `1 × in_dim`; returns `1 × 1`.
pub fn readout(fw: &mut Forward<'_>, cfg: &ModelConfig, fingerprint: Var) -> Result<Var> {
    let act = cfg.activation();
    let mut x = fingerprint;
    for l in 0..cfg.readout_layers {
        let y = fw.linear(x, &format!("readout.{l}"))?;
        let y = act.apply(fw, y);
        x = fw.dropout(y, cfg.dropout_readout)?;
    }
    let logit = fw.linear(x, "readout.out")?;
    Ok(fw.graph.sigmoid(logit))
}

/// SchNet filter network: Gaussian expansion → linear → ssp → linear.
fn filter_network(fw: &mut Forward<'_>, prefix: &str, gauss: Var) -> Result<Var> {
    let h = fw.linear(gauss, &format!("{prefix}.1"))?;
    let h = fw.graph.shifted_softplus(h);
    fw.linear(h, &format!("{prefix}.2"))
}

/// Directed-edge updates `h ← τ(h⁰ + W_m m)` with
/// `m_vw = Σ_{k∈N(v)\w} h_kv`, repeated `depth` times.
///
/// `edges` must be reverse-adjacent (`edges[e ^ 1]` is the reverse of
/// `edges[e]`).
fn directed_updates(
    fw: &mut Forward<'_>,
    cfg: &ModelConfig,
    h0: Var,
    edges: &[(usize, usize)],
    n_nodes: usize,
) -> Result<Var> {
    let act = cfg.activation();
    let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
    let tgt: Vec<usize> = edges.iter().map(|e| e.1).collect();
    let rev: Vec<usize> = (0..edges.len()).map(|e| e ^ 1).collect();
    let w_m = fw.param("mp.W_m.w")?;
    let mut h = h0;
    for _ in 0..cfg.depth() {
        let incoming = fw.graph.scatter_add_rows(h, &tgt, n_nodes)?;
        let at_source = fw.graph.gather_rows(incoming, &src)?;
        let reverse = fw.graph.gather_rows(h, &rev)?;
        let m = fw.graph.sub(at_source, reverse)?;
        let wm = fw.graph.matmul(m, w_m)?;
        let pre = fw.graph.add(h0, wm)?;
        let a = act.apply(fw, pre);
        h = fw.dropout(a, cfg.dropout_conv)?;
    }
    Ok(h)
}

/// Bonded directed-edge hidden states after all convolutions
/// (`bonded.len() × F`), shared by `chemprop2d` and `cp3d_ndu`.
pub fn bond_states(fw: &mut Forward<'_>, cfg: &ModelConfig, g: &FeaturizedGraph) -> Result<Var> {
    let src: Vec<usize> = g.bonded.iter().map(|e| e.0).collect();
    let x_src = gather_constant(&g.x, &src);
    let input = Tensor::from_rows_concat(&x_src, &g.e_bond)?;
    let input = fw.constant(input);
    let h0 = fw.linear_nobias(input, "mp.W_i")?;
    let h0 = cfg.activation().apply(fw, h0);
    directed_updates(fw, cfg, h0, &g.bonded, g.n_atoms)
}

/// `m_v = Σ_w h_vw`, `h_v = τ(W_a [x_v ‖ m_v])`.
fn edge_to_node(fw: &mut Forward<'_>, cfg: &ModelConfig, x: &Tensor, edge_states: Var, src: &[usize]) -> Result<Var> {
    let m = fw.graph.scatter_add_rows(edge_states, src, x.rows())?;
    let xv = fw.constant(x.clone());
    let cat = fw.graph.concat_cols(&[xv, m])?;
    let pre = fw.linear(cat, "mp.W_a")?;
    Ok(cfg.activation().apply(fw, pre))
}

/// `1 × F` molecule fingerprint of the 2D directed-edge model.
pub fn chemprop2d_fingerprint(fw: &mut Forward<'_>, cfg: &ModelConfig, g: &FeaturizedGraph) -> Result<Var> {
    fw.fingerprint_evals += 1;
    let h = bond_states(fw, cfg, g)?;
    let src: Vec<usize> = g.bonded.iter().map(|e| e.0).collect();
    let hv = edge_to_node(fw, cfg, &g.x, h, &src)?;
    Ok(fw.graph.sum_rows(hv))
}

/// Several conformer geometries of one molecule laid out as a disjoint
/// union, so one pass fingerprints the whole batch.
#[derive(Clone, Debug)]
pub struct GeometryBatch {
    pub n_conformers: usize,
    pub n_nodes: usize,
    /// `n_nodes × ATOM_FDIM`
    pub x: Tensor,
    /// Conformer of each node.
    pub node_conformer: Vec<usize>,
    /// Reverse-adjacent directed pairs over batch node indices.
    pub pairs: Vec<(usize, usize)>,
    /// `pairs.len() × n_gaussians`
    pub gauss: Tensor,
    /// `(pair position, bonded edge index)` for every bonded pair.
    pub bonded: Vec<(usize, usize)>,
    /// `pairs.len() × BOND_FDIM`, zero rows for non-bonded pairs.
    pub e_bond: Tensor,
}

impl GeometryBatch {
    pub fn new(g: &FeaturizedGraph, geometries: &[&Geometry], basis: &GaussianBasis) -> Result<Self> {
        let n = g.n_atoms;
        let b = geometries.len();
        let node_src: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let mut pairs = Vec::new();
        let mut dists = Vec::new();
        let mut bonded = Vec::new();
        let mut e_bond = Vec::new();
        for (k, geo) in geometries.iter().enumerate() {
            for (&(v, w), &d) in geo.pairs.iter().zip(&geo.dists) {
                if let Some(e) = g.bond_edge(v, w) {
                    bonded.push((pairs.len(), e));
                    e_bond.extend_from_slice(g.e_bond.row_slice(e));
                } else {
                    e_bond.extend(std::iter::repeat_n(0.0, BOND_FDIM));
                }
                pairs.push((k * n + v, k * n + w));
                dists.push(d);
            }
        }
        Ok(GeometryBatch {
            n_conformers: b,
            n_nodes: b * n,
            x: gather_constant(&g.x, &node_src),
            node_conformer: (0..b).flat_map(|k| std::iter::repeat_n(k, n)).collect(),
            gauss: basis.expand_all(&dists)?,
            e_bond: Tensor::matrix(pairs.len(), BOND_FDIM, e_bond)?,
            pairs,
            bonded,
        })
    }

    fn src(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    fn tgt(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    fn bonded_positions(&self) -> Vec<usize> {
        self.bonded.iter().map(|b| b.0).collect()
    }

    fn bonded_edges(&self) -> Vec<usize> {
        self.bonded.iter().map(|b| b.1).collect()
    }
}

/// Per-conformer fingerprints (`n_conformers × F`) for a 3D architecture.
///
/// `bond_hidden` is the precomputed [`bond_states`] output, required for
/// `cp3d_ndu` and ignored otherwise.
pub fn geometry_fingerprints(
    fw: &mut Forward<'_>,
    cfg: &ModelConfig,
    batch: &GeometryBatch,
    bond_hidden: Option<Var>,
) -> Result<Var> {
    fw.fingerprint_evals += batch.n_conformers;
    let hv = match cfg.arch {
        Arch::Chemprop2d => return Err(Error::invalid("chemprop2d has no geometry fingerprint")),
        Arch::SchNetFeatures => schnet_nodes(fw, cfg, batch)?,
        Arch::Chemprop3d => chemprop3d_nodes(fw, cfg, batch)?,
        Arch::Cp3dNdu => {
            let h = bond_hidden.ok_or_else(|| Error::invalid("cp3d_ndu needs bonded hidden states"))?;
            cnd_nodes(fw, cfg, batch, h)?
        }
    };
    fw.graph.scatter_add_rows(hv, &batch.node_conformer, batch.n_conformers)
}

fn schnet_nodes(fw: &mut Forward<'_>, cfg: &ModelConfig, batch: &GeometryBatch) -> Result<Var> {
    let (src, tgt) = (batch.src(), batch.tgt());
    let x = fw.constant(batch.x.clone());
    let mut h = fw.linear(x, "mp.embed")?;
    let gauss = fw.constant(batch.gauss.clone());
    let bonded_feats = gather_constant(&batch.e_bond, &batch.bonded_positions());
    let bonded_feats = fw.constant(bonded_feats);
    for t in 0..cfg.depth() {
        let filt = filter_network(fw, &format!("mp.conv{t}.filter"), gauss)?;
        // bond channel: non-bonded pairs stay exactly zero
        let bh = fw.linear(bonded_feats, &format!("mp.conv{t}.bond"))?;
        let bh = fw.graph.shifted_softplus(bh);
        let bh = fw
            .graph
            .scatter_add_rows(bh, &batch.bonded_positions(), batch.pairs.len())?;
        let e = fw.graph.concat_cols(&[filt, bh])?;
        let j = fw.linear_nobias(h, &format!("mp.conv{t}.J"))?;
        let jw = fw.graph.gather_rows(j, &tgt)?;
        let msg = fw.graph.mul(jw, e)?;
        let agg = fw.graph.scatter_add_rows(msg, &src, batch.n_nodes)?;
        let u = fw.linear_nobias(agg, &format!("mp.conv{t}.I1"))?;
        let u = fw.graph.shifted_softplus(u);
        let u = fw.linear_nobias(u, &format!("mp.conv{t}.I2"))?;
        let u = fw.dropout(u, cfg.dropout_conv)?;
        h = fw.graph.add(h, u)?;
    }
    Ok(h)
}

fn chemprop3d_nodes(fw: &mut Forward<'_>, cfg: &ModelConfig, batch: &GeometryBatch) -> Result<Var> {
    let act = cfg.activation();
    let src = batch.src();
    let x_src = gather_constant(&batch.x, &src);
    let gauss = fw.constant(batch.gauss.clone());
    let e_dist = filter_network(fw, "mp.filter", gauss)?;
    let xs = fw.constant(x_src.clone());
    let dist_in = fw.graph.concat_cols(&[xs, e_dist])?;
    let h_dist = fw.linear_nobias(dist_in, "mp.W_i_dist")?;
    let h_dist = act.apply(fw, h_dist);
    let bond_in = fw.constant(Tensor::from_rows_concat(&x_src, &batch.e_bond)?);
    let h_bond = fw.linear_nobias(bond_in, "mp.W_i_bond")?;
    let h_bond = act.apply(fw, h_bond);
    let h0 = fw.graph.concat_cols(&[h_dist, h_bond])?;
    let h = directed_updates(fw, cfg, h0, &batch.pairs, batch.n_nodes)?;
    edge_to_node(fw, cfg, &batch.x, h, &src)
}

fn cnd_nodes(fw: &mut Forward<'_>, cfg: &ModelConfig, batch: &GeometryBatch, bond_hidden: Var) -> Result<Var> {
    let gauss = fw.constant(batch.gauss.clone());
    let e_dist = filter_network(fw, "mp.filter", gauss)?;
    let hb = fw.graph.gather_rows(bond_hidden, &batch.bonded_edges())?;
    let hb = fw
        .graph
        .scatter_add_rows(hb, &batch.bonded_positions(), batch.pairs.len())?;
    let cat = fw.graph.concat_cols(&[hb, e_dist])?;
    edge_to_node(fw, cfg, &batch.x, cat, &batch.src())
}

/// Rows `idx` of a constant matrix.
fn gather_constant(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::matrix(idx.len(), c, data).expect("sized")
}

impl Tensor {
    /// Row-wise concatenation `[a ‖ b]` of two constant matrices.
    pub fn from_rows_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rows() != b.rows() {
            return Err(Error::Shape {
                op: "concat",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for i in 0..a.rows() {
            data.extend_from_slice(a.row_slice(i));
            data.extend_from_slice(b.row_slice(i));
        }
        Tensor::matrix(a.rows(), a.cols() + b.cols(), data)
    }
}
