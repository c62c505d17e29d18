use rand::Rng;

use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op is broadcast over the left.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// `1×c` row repeated over every row of an `r×c` left operand.
    Row,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    Transpose(Var),
    Softmax(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    ShiftedSoftplus(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Bce(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities inside the BCE loss.
pub const BCE_EPS: f64 = 1e-12;

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so node indices are already a
/// topological order and `backward` walks them from the loss downwards.
/// A graph built with [`Graph::no_grad`] computes identical forward values
/// but keeps no backward information.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    kinks: Option<Vec<bool>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Total derivative of the loss with respect to `v`.
    ///
    /// Returns zeros for a `requires_grad` value the loss does not depend
    /// on, and `None` for values that never required a gradient.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        let data = match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; shape.iter().product()],
        };
        Some(Tensor::new(shape, data).expect("gradient shape matches value"))
    }
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    if (ar, ac) == (br, bc) {
        Ok(Bcast::Same)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else if br == 1 && bc == 1 {
        Ok(Bcast::Scalar)
    } else {
        Err(Error::Shape {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        })
    }
}

#[inline]
fn b_index(mode: Bcast, i: usize, cols: usize) -> usize {
    match mode {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Scalar => 0,
    }
}

/// Sums a full-size gradient back down to the broadcast operand's shape.
fn reduce_bcast(mode: Bcast, g: &[f64], cols: usize) -> Vec<f64> {
    match mode {
        Bcast::Same => g.to_vec(),
        Bcast::Row => {
            let mut out = vec![0.0; cols];
            for (i, v) in g.iter().enumerate() {
                out[i % cols] += v;
            }
            out
        }
        Bcast::Scalar => vec![g.iter().sum()],
    }
}

pub fn shifted_softplus(x: f64) -> f64 {
    // ln(0.5 e^x + 0.5) = softplus(x) - ln 2
    x.max(0.0) + (-x.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = t.dims();
    let mut out = t.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::matrix(r, c, out).expect("same shape")
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
            kinks: None,
        }
    }

    /// A graph that evaluates forward values only.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: false,
            kinks: None,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input value. Only leaves created with `requires_grad` (on a
    /// recording graph) receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Starts recording, for every later ReLU-family op, which inputs are
    /// positive. Two evaluations with equal patterns lie on the same
    /// linear piece of every such op, which finite-difference checks use
    /// to skip stencils straddling a kink.
    pub fn track_kinks(&mut self) {
        self.kinks.get_or_insert_with(Vec::new);
    }

    /// Signs recorded since [`Graph::track_kinks`]; empty when not tracking.
    pub fn kink_pattern(&self) -> &[bool] {
        self.kinks.as_deref().unwrap_or(&[])
    }

    fn record_kinks(&mut self, a: Var) {
        if let Some(k) = self.kinks.as_mut() {
            k.extend(self.nodes[a.0].value.data().iter().map(|v| *v > 0.0));
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = bcast(name, ta, tb)?;
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data()[b_index(mode, i, cols)]))
            .collect();
        Ok((Tensor::new(ta.shape().to_vec(), data)?, mode))
    }

    /// `a + b`; `b` may be the same shape, a `1×c` row, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b, mode), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b, mode), &[a, b]))
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b, mode), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).expect("same shape");
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Concatenation along the last dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims();
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![r],
                });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks row blocks with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![cols],
                    rhs: vec![t.cols()],
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        self.push(Tensor::row(out), Op::SumRows(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record_kinks(a);
        let out = self.map(a, |v| v.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.record_kinks(a);
        let out = self.map(a, |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// `ln(0.5 eˣ + 0.5)`, zero at the origin.
    pub fn shifted_softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, shifted_softplus);
        self.push(out, Op::ShiftedSoftplus(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Inverted dropout. Identity when `rng` is `None` (eval mode) or the
    /// rate is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = rng else { return Ok(a) };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask), &[a]))
    }

    /// `out[i] = a[idx[i]]` over rows.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather index {i} out of range {r}")));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// `out[idx[i]] += a[i]` into `n_out` zero-initialized rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims();
        if idx.len() != r {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                lhs: vec![r],
                rhs: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; n_out * c];
        for (i, &o) in idx.iter().enumerate() {
            if o >= n_out {
                return Err(Error::invalid(format!("scatter index {o} out of range {n_out}")));
            }
            for (d, v) in data[o * c..(o + 1) * c].iter_mut().zip(t.row_slice(i)) {
                *d += v;
            }
        }
        let out = Tensor::matrix(n_out, c, data)?;
        Ok(self.push(out, Op::ScatterAddRows(a, idx.to_vec()), &[a]))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    /// Probabilities are clamped to `[ε, 1-ε]`, `ε = 1e-12`.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(p);
        if t.numel() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let n = targets.len() as f64;
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, targets.to_vec()), &[p]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims();
                let n = tb.cols();
                if self.requires_grad(*a) {
                    // dA = G · Bᵀ
                    let bt = tb.transpose();
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, bt.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · G
                    let at = ta.transpose();
                    let mut gb = vec![0.0; k * n];
                    matmul_into(at.data(), g, &mut gb, k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, g.to_vec());
                if self.requires_grad(*b) {
                    let mut gb = reduce_bcast(*mode, g, out.cols());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let cols = out.cols();
                if self.requires_grad(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data()[b_index(*mode, i, cols)])
                        .collect();
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let full: Vec<f64> = g.iter().zip(ta.data()).map(|(gv, av)| gv * av).collect();
                    self.accumulate(grads, *b, reduce_bcast(*mode, &full, cols));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.accumulate(grads, *p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).dims();
                let mut ga = Vec::with_capacity(r * c);
                for _ in 0..r {
                    ga.extend_from_slice(g);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Transpose(a) => {
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec())
                    .expect("same shape")
                    .transpose();
                self.accumulate(grads, *a, gt.into_data());
            }
            Op::Softmax(a) => {
                let (r, c) = out.dims();
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        ga[j] = y[j] * (g[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::ShiftedSoftplus(a) => {
                let x = self.value(*a).data();
                let ga = g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Dropout(a, mask) => {
                let ga = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).dims();
                let mut ga = vec![0.0; r * c];
                for (i, &src) in idx.iter().enumerate() {
                    for (d, v) in ga[src * c..(src + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(idx.len() * c);
                for &o in idx {
                    ga.extend_from_slice(&g[o * c..(o + 1) * c]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Bce(p, targets) => {
                let n = targets.len() as f64;
                let ga = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &y)| {
                        let pv = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        g[0] * (pv - y) / (pv * (1.0 - pv)) / n
                    })
                    .collect();
                self.accumulate(grads, *p, ga);
            }
        }
    }
}
