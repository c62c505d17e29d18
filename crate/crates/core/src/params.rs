//! Named parameter storage, its binding onto a gradient tape, and the
//! checkpoint file format.
//!
//! A checkpoint is UTF-8 text: the magic line `CONFMPNN-CKPT-1`, then one
//! JSON object
//!
//! ```text
//! {"header": <any JSON>, "params": {"<name>": {"shape": [r, c], "data": [row-major f64...]}}}
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a saved
//! store reloads bit-identical.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &str = "CONFMPNN-CKPT-1";

/// Learned tensors keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Glorot-uniform weight matrix `fan_in × fan_out`.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data).expect("sized"));
    }

    pub fn init_bias(&mut self, name: &str, n: usize) {
        self.insert(name, Tensor::zeros(1, n));
    }

    pub fn write_checkpoint<H: Serialize>(&self, path: &Path, header: &H) -> Result<()> {
        #[derive(Serialize)]
        struct Body<'a, H> {
            header: &'a H,
            params: &'a ParamStore,
        }
        let mut text = String::from(CHECKPOINT_MAGIC);
        text.push('\n');
        text.push_str(&serde_json::to_string(&Body { header, params: self })?);
        text.push('\n');
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn read_checkpoint<H: for<'de> Deserialize<'de>>(path: &Path) -> Result<(H, ParamStore)> {
        let text = crate::io::read_to_string(path)?;
        Self::parse_checkpoint(&text)
    }

    pub fn parse_checkpoint<H: for<'de> Deserialize<'de>>(text: &str) -> Result<(H, ParamStore)> {
        #[derive(Deserialize)]
        struct Body<H> {
            header: H,
            params: ParamStore,
        }
        let (magic, rest) = text.split_once('\n').unwrap_or((text, ""));
        if magic.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic header {magic:?}")));
        }
        let body: Body<H> = serde_json::from_str(rest)?;
        for (name, t) in body.params.iter() {
            let n: usize = t.shape().iter().product();
            if n != t.numel() || t.shape().len() > 2 {
                return Err(Error::Checkpoint(format!("parameter {name} has inconsistent shape")));
            }
        }
        Ok((body.header, body.params))
    }
}

/// One forward evaluation: a tape, the parameters bound onto it, and the
/// train/eval mode.
///
/// Parameters are registered lazily the first time a model asks for them,
/// so gradients come back only for parameters the forward pass touched.
pub struct Forward<'p> {
    pub graph: Graph,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
    rng: Option<ChaCha8Rng>,
    /// Number of single-geometry fingerprints computed so far.
    pub fingerprint_evals: usize,
    /// Attention coefficients per head from the last pooled molecule.
    pub attention: Vec<Tensor>,
    /// Molecule fingerprint fed to the readout by the last prediction.
    pub last_fingerprint: Option<Tensor>,
}

impl<'p> Forward<'p> {
    /// Training mode: gradients recorded, dropout active with `rng`.
    pub fn train(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self::build(params, Graph::new(), true, Some(rng))
    }

    /// Evaluation with gradients (dropout off), for gradient checks.
    pub fn eval_with_grad(params: &'p ParamStore) -> Self {
        Self::build(params, Graph::new(), true, None)
    }

    /// Inference: no tape, no dropout.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::build(params, Graph::no_grad(), false, None)
    }

    fn build(params: &'p ParamStore, graph: Graph, trainable: bool, rng: Option<ChaCha8Rng>) -> Self {
        Forward {
            graph,
            params,
            bound: HashMap::new(),
            trainable,
            rng,
            fingerprint_evals: 0,
            attention: Vec::new(),
            last_fingerprint: None,
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?
            .clone();
        let v = self.graph.leaf(t, self.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.graph.constant(t)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        self.graph.dropout(x, rate, self.rng.as_mut())
    }

    /// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        self.graph.add(y, b)
    }

    /// `x · W` with parameter `{prefix}.w`.
    pub fn linear_nobias(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        self.graph.matmul(x, w)
    }

    /// Gradients of every bound parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Adds `{prefix}.w` (`fan_in × fan_out`) and `{prefix}.b`.
pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    store.init_weight(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.init_bias(&format!("{prefix}.b"), fan_out);
}
