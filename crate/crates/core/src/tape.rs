//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so the node list is topologically sorted by construction. [`Tape::backward`]
//! walks it in reverse and accumulates gradients additively, which handles
//! fan-out without special casing.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, ParamId, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        layout: MatLayout,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        count: usize,
    },
}

/// Dimensions of a (possibly batched) matrix product.
#[derive(Clone, Copy)]
struct MatLayout {
    batch: usize,
    m: usize,
    p: usize,
    q: usize,
    /// `b` is one matrix shared by every batch entry.
    shared_b: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Single-threaded; build a fresh tape per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter bound with [`Tape::param`], if it was reachable
    /// from the loss.
    pub fn param(&self, param: &Param) -> Option<&Tensor> {
        self.params.get(&param.id()).and_then(|&v| self.get(v))
    }

    #[cfg(test)]
    pub(crate) fn from_param_grads(pairs: Vec<(&Param, Tensor)>) -> Self {
        let mut params = HashMap::new();
        let mut grads = Vec::new();
        for (i, (p, g)) in pairs.into_iter().enumerate() {
            params.insert(p.id(), Var(i));
            grads.push(Some(g));
        }
        Self { grads, params }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out[m×q] += a[m×p] · b[p×q]
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let row = &mut out[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * q..(k + 1) * q];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out[m×q] += a[m×p] · b[q×p]ᵀ
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            out[i * q + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[p×q] += a[m×p]ᵀ · b[m×q]
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, p: usize, q: usize) {
    for i in 0..m {
        let brow = &b[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * q..(k + 1) * q];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn node(&self, var: Var) -> Result<&Node> {
        self.nodes.get(var.0).ok_or(Error::UnknownVar(var.0))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Inputs that should receive gradients pass `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter as a gradient-tracking leaf. Binding the same
    /// parameter twice returns the same variable.
    pub fn param(&mut self, param: &Param) -> Var {
        if let Some(&v) = self.params.get(&param.id()) {
            return v;
        }
        let v = self.leaf(param.value.clone(), true);
        self.params.insert(param.id(), v);
        v
    }

    /// Matrix product over the last two axes.
    ///
    /// When `b` is 2-D it is shared: `a` may have any rank and its last axis is
    /// contracted. Otherwise `a` and `b` must have equal rank and identical
    /// leading (batch) dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, with the same batching rules as [`Tape::matmul`].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (
            self.node(a)?.value.shape().to_vec(),
            self.node(b)?.value.shape().to_vec(),
        );
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        let mismatch = || Error::Shape {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.is_empty() || sb.len() < 2 {
            return Err(mismatch());
        }
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (p, q) = if trans_b { (cb, rb) } else { (rb, cb) };
        if *sa.last().unwrap() != p {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(q);
        let layout = if sb.len() == 2 {
            MatLayout {
                batch: 1,
                m: sa.iter().product::<usize>() / p,
                p,
                q,
                shared_b: true,
            }
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            MatLayout {
                batch: sa[..sa.len() - 2].iter().product(),
                m: sa[sa.len() - 2],
                p,
                q,
                shared_b: false,
            }
        };
        let MatLayout { batch, m, .. } = layout;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; batch * m * q];
        for t in 0..batch {
            let aa = &av[t * m * p..(t + 1) * m * p];
            let bb = if layout.shared_b {
                bv
            } else {
                &bv[t * p * q..(t + 1) * p * q]
            };
            let oo = &mut out[t * m * q..(t + 1) * m * q];
            if trans_b {
                mm_nt(aa, bb, oo, m, p, q);
            } else {
                mm_nn(aa, bb, oo, m, p, q);
            }
        }
        check_finite(op, &out)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a, b, trans_b, layout },
            rg,
        ))
    }

    /// Dispatches on [`Elementwise`]. Binary kinds require `b` with the same
    /// shape as `a`; unary kinds ignore it.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |b: Option<Var>| b.ok_or_else(|| Error::InvalidTensor(format!("{kind:?} needs two operands")));
        match kind {
            Elementwise::Add => self.add(a, binary(b)?),
            Elementwise::Sub => self.sub(a, binary(b)?),
            Elementwise::Mul => self.mul(a, binary(b)?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Sigmoid => self.sigmoid(a),
            Elementwise::Tanh => self.tanh(a),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var> {
        let (na, nb) = (&self.node(a)?.value, &self.node(b)?.value);
        if na.shape() != nb.shape() {
            return Err(Error::Shape {
                op,
                lhs: na.shape().to_vec(),
                rhs: nb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = na.data().iter().zip(nb.data()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(op, &out)?;
        let shape = na.shape().to_vec();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), record, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, op: &'static str, x: Var, f: impl Fn(f64) -> f64, record: Op) -> Result<Var> {
        let nx = &self.node(x)?.value;
        let out: Vec<f64> = nx.data().iter().map(|&v| f(v)).collect();
        check_finite(op, &out)?;
        let shape = nx.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), record, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * factor, Op::Scale { x, factor })
    }

    /// Adds a bias vector along the last axis; the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (&self.node(x)?.value, &self.node(bias)?.value);
        if nb.rank() != 1 || nb.numel() != nx.last_dim() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: nx.shape().to_vec(),
                rhs: nb.shape().to_vec(),
            });
        }
        let k = nb.numel();
        let bd = nb.data();
        let out: Vec<f64> = nx.data().iter().enumerate().map(|(i, &v)| v + bd[i % k]).collect();
        check_finite("add_bias", &out)?;
        let shape = nx.shape().to_vec();
        let rg = self.needs_grad(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias { x, bias }, rg))
    }

    /// Softmax over the last axis. `allowed`, when given, has one flag per
    /// element; disallowed entries come out as exactly zero and never
    /// influence the others.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let nx = &self.node(x)?.value;
        if let Some(mask) = allowed {
            if mask.len() != nx.numel() {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: nx.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let n = nx.last_dim();
        let mut out = vec![0.0; nx.numel()];
        for r in 0..nx.rows() {
            let row = nx.row(r);
            let keep = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    orow[j] = (row[j] - max).exp();
                    total += orow[j];
                }
            }
            orow.iter_mut().for_each(|v| *v /= total);
        }
        check_finite("softmax_rows", &out)?;
        let shape = nx.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), rg))
    }

    /// Normalizes each last-axis row to zero mean and unit (biased) variance,
    /// then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let nx = &self.node(x)?.value;
        let (ng, nb) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let k = nx.last_dim();
        if ng.shape() != [k] || nb.shape() != [k] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: nx.shape().to_vec(),
                rhs: ng.shape().to_vec(),
            });
        }
        let rows = nx.rows();
        let mut normalized = vec![0.0; nx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; nx.numel()];
        for r in 0..rows {
            let row = nx.row(r);
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..k {
                let xh = (row[j] - mean) * is;
                normalized[r * k + j] = xh;
                out[r * k + j] = xh * ng.data()[j] + nb.data()[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = nx.shape().to_vec();
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D `table`; the result has shape `[ids.len() × cols]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = &self.node(table)?.value;
        if nt.rank() != 2 || ids.is_empty() {
            return Err(Error::InvalidTensor("embedding needs a 2-D table and ids".into()));
        }
        let (rows, k) = (nt.shape()[0], nt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange { id: bad, size: rows });
        }
        let index: Vec<usize> = ids.iter().flat_map(|&i| (i * k)..(i * k + k)).collect();
        self.gather(table, index, vec![ids.len(), k])
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Covers row lookups and
    /// axis permutations; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let nx = &self.node(x)?.value;
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= nx.numel()) {
            return Err(Error::Shape {
                op: "gather",
                lhs: nx.shape().to_vec(),
                rhs: shape,
            });
        }
        let out: Vec<f64> = index.iter().map(|&i| nx.data()[i]).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshape(shape)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1/(1-rate)`. A zero rate returns `x` unchanged
    /// without drawing from `rng`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate == 0.0 {
            self.node(x)?;
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let nx = &self.node(x)?.value;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..nx.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = nx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = nx.shape().to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.node(x)?.value.data().iter().sum();
        check_finite("sum", &[total])?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    /// Label-smoothed cross-entropy averaged over non-padding rows.
    ///
    /// Each row of `logits` is scored against a target distribution placing
    /// `1 - smoothing` on the gold id and `smoothing / (V - 1)` on every other
    /// id. `None` targets mark padding and contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let nl = &self.node(logits)?.value;
        let v = nl.last_dim();
        if nl.rows() != targets.len() {
            return Err(Error::LengthMismatch {
                what: "cross_entropy rows vs targets",
                left: nl.rows(),
                right: targets.len(),
            });
        }
        if !(0.0..1.0).contains(&smoothing) || (smoothing > 0.0 && v < 2) {
            return Err(Error::Config(format!(
                "label smoothing {smoothing} invalid for {v} classes"
            )));
        }
        if let Some(id) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id: *id, size: v });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::AllPadding);
        }
        let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
        let mut probs = vec![0.0; nl.numel()];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(gold) = *target else { continue };
            let row = nl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for (j, &z) in row.iter().enumerate() {
                let log_p = z - lse;
                probs[r * v + j] = log_p.exp();
                let q = if j == gold { 1.0 - smoothing } else { off };
                if q > 0.0 {
                    total -= q * log_p;
                }
            }
        }
        let loss = total / count as f64;
        check_finite("cross_entropy", &[loss])?;
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                smoothing,
                count,
            },
            rg,
        ))
    }

    /// Smallest `|input|` seen by any ReLU on this tape; `None` if there are
    /// no ReLUs. Gradient checks use this to avoid probing at a kink.
    pub fn min_relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|v| v.abs())
                        .fold(f64::INFINITY, f64::min),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    g.filter(|_| self.nodes[i].requires_grad)
                        .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
                })
                .collect(),
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, delta: Vec<f64>| {
            if wants(v) {
                accumulate(&mut grads[v.0], delta);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b, layout } => {
                let MatLayout {
                    batch,
                    m,
                    p,
                    q,
                    shared_b,
                } = *layout;
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    for t in 0..batch {
                        let bb = if shared_b { bv } else { &bv[t * p * q..(t + 1) * p * q] };
                        let gg = &g[t * m * q..(t + 1) * m * q];
                        let out = &mut da[t * m * p..(t + 1) * m * p];
                        if *trans_b {
                            // dA = dC · B with B stored [q×p]
                            mm_nn(gg, bb, out, m, q, p);
                        } else {
                            // dA = dC · Bᵀ with B stored [p×q]
                            mm_nt(gg, bb, out, m, q, p);
                        }
                    }
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for t in 0..batch {
                        let aa = &av[t * m * p..(t + 1) * m * p];
                        let gg = &g[t * m * q..(t + 1) * m * q];
                        let out = if shared_b {
                            &mut db[..]
                        } else {
                            &mut db[t * p * q..(t + 1) * p * q]
                        };
                        if *trans_b {
                            // dB = dCᵀ · A, stored [q×p]
                            mm_tn(gg, aa, out, m, q, p);
                        } else {
                            // dB = Aᵀ · dC
                            mm_tn(aa, gg, out, m, p, q);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::AddBias { x, bias } => {
                send(*x, g.to_vec());
                let k = self.nodes[bias.0].value.numel();
                let mut db = vec![0.0; k];
                for (i, gv) in g.iter().enumerate() {
                    db[i % k] += gv;
                }
                send(*bias, db);
            }
            Op::Scale { x, factor } => send(*x, g.iter().map(|v| v * factor).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::Tanh(x) => send(
                *x,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let k = node.value.last_dim();
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                let mut dx = vec![0.0; g.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * k..(r + 1) * k];
                    let xr = &normalized[r * k..(r + 1) * k];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..k {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let d = gr[j] * gam[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                    }
                    let kf = k as f64;
                    for j in 0..k {
                        let d = gr[j] * gam[j];
                        dx[r * k + j] = is / kf * (kf * d - sum_d - xr[j] * sum_dx);
                    }
                }
                send(*x, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (gv, &i) in g.iter().zip(index) {
                    dx[i] += gv;
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.nodes[x.0].value.numel()]),
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                smoothing,
                count,
            } => {
                let v = self.nodes[logits.0].value.last_dim();
                let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
                let scale = g[0] / *count as f64;
                let mut dz = vec![0.0; probs.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(gold) = *target else { continue };
                    for j in 0..v {
                        let q = if j == gold { 1.0 - smoothing } else { off };
                        dz[r * v + j] = scale * (probs[r * v + j] - q);
                    }
                }
                send(*logits, dz);
            }
        }
    }
}
