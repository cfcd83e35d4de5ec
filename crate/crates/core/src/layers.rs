//! Baseline transformer building blocks.
//!
//! Activations are `[batch × seq × k]` (or `[seq × k]`); every position-wise
//! layer acts on the last axis.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{join_name, Param, ParamKind, Parameterized, Tensor};

/// Per-forward settings: dropout and the gate test hook.
pub struct ForwardCtx {
    dropout: f64,
    rng: Option<ChaCha8Rng>,
    gate_override: Option<f64>,
}

impl ForwardCtx {
    /// Deterministic evaluation: no dropout.
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            rng: None,
            gate_override: None,
        }
    }

    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        Self {
            dropout,
            rng: Some(rng),
            gate_override: None,
        }
    }

    /// Forces every gated residual gate to the constant `value`. Test hook for
    /// recovering the plain residual (`value = 1`).
    pub fn with_gate_override(mut self, value: f64) -> Self {
        self.gate_override = Some(value);
        self
    }

    pub fn gate_override(&self) -> Option<f64> {
        self.gate_override
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

/// Uniform fan-in initialization bound `1/√fan_in`.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Affine map `y = x·Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let w = Tensor::uniform([out_dim, in_dim], fan_in_bound(in_dim), rng);
        Self {
            weight: Param::new(w, ParamKind::Weight),
            bias: Param::new(Tensor::zeros([out_dim]), ParamKind::Bias),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Shape {
                op: "linear",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weight: Param::new(weight, ParamKind::Weight),
            bias: Param::new(bias, ParamKind::Bias),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul_nt(x, w)?;
        tape.add_bias(y, b)
    }
}

impl Parameterized for LinearLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join_name(prefix, "weight"), &self.weight));
        out.push((join_name(prefix, "bias"), &self.bias));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join_name(prefix, "weight"), &mut self.weight));
        out.push((join_name(prefix, "bias"), &mut self.bias));
    }
}

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNormLayer {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(k: usize, eps: f64) -> Self {
        Self {
            gamma: Param::new(Tensor::full([k], 1.0), ParamKind::Norm),
            beta: Param::new(Tensor::zeros([k]), ParamKind::Norm),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl Parameterized for LayerNormLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join_name(prefix, "gamma"), &self.gamma));
        out.push((join_name(prefix, "beta"), &self.beta));
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join_name(prefix, "gamma"), &mut self.gamma));
        out.push((join_name(prefix, "beta"), &mut self.beta));
    }
}

/// Attention mask: `true` marks a key position a query may attend to.
///
/// Either one `[seq_q × seq_k]` pattern shared across the batch, or one
/// pattern per batch entry (`[batch × seq_q × seq_k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub seq_q: usize,
    pub seq_k: usize,
    pub batch: Option<usize>,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn causal(seq: usize) -> Self {
        let allowed = (0..seq).flat_map(|i| (0..seq).map(move |j| j <= i)).collect();
        Self {
            seq_q: seq,
            seq_k: seq,
            batch: None,
            allowed,
        }
    }

    /// Blocks padded key positions. `key_pad[b][j]` is `true` where the key
    /// at position `j` of batch entry `b` is padding.
    pub fn key_padding(key_pad: &[Vec<bool>], seq_q: usize) -> Self {
        let seq_k = key_pad.first().map_or(0, Vec::len);
        let allowed = key_pad
            .iter()
            .flat_map(|row| (0..seq_q).flat_map(move |_| row.iter().map(|&pad| !pad)))
            .collect();
        Self {
            seq_q,
            seq_k,
            batch: Some(key_pad.len()),
            allowed,
        }
    }

    fn get(&self, b: usize, i: usize, j: usize) -> bool {
        let base = if self.batch.is_some() {
            b * self.seq_q * self.seq_k
        } else {
            0
        };
        self.allowed[base + i * self.seq_k + j]
    }

    /// Expands to one flag per attention score of shape `[batch·heads × q × k]`.
    fn expand(&self, batch: usize, heads: usize, seq_q: usize, seq_k: usize) -> Result<Vec<bool>> {
        let batch_ok = self.batch.is_none_or(|b| b == batch);
        if self.seq_q != seq_q || self.seq_k != seq_k || !batch_ok {
            return Err(Error::Shape {
                op: "attention mask",
                lhs: vec![batch, seq_q, seq_k],
                rhs: vec![self.batch.unwrap_or(1), self.seq_q, self.seq_k],
            });
        }
        let mut out = Vec::with_capacity(batch * heads * seq_q * seq_k);
        for b in 0..batch {
            for _ in 0..heads {
                for i in 0..seq_q {
                    for j in 0..seq_k {
                        out.push(self.get(b, i, j));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Multi-head scaled dot-product attention with biased projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub num_heads: usize,
}

/// `[batch × seq × k]` view of an activation; rank-2 inputs are one batch entry.
fn batch_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [s, k] => Ok((1, s, k)),
        [b, s, k] => Ok((b, s, k)),
        _ => Err(Error::InvalidTensor(format!(
            "expected [seq × k] or [batch × seq × k], got {shape:?}"
        ))),
    }
}

impl MultiHeadAttention {
    pub fn new(k: usize, num_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_heads == 0 || !k.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "num_heads {num_heads} must divide model dimension {k}"
            )));
        }
        Ok(Self {
            wq: LinearLayer::new(k, k, rng),
            wk: LinearLayer::new(k, k, rng),
            wv: LinearLayer::new(k, k, rng),
            wo: LinearLayer::new(k, k, rng),
            num_heads,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.wq.out_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.num_heads
    }

    // [b × s × k] → [b·h × s × d]
    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, s: usize) -> Result<Var> {
        let (h, d) = (self.num_heads, self.head_dim());
        let k = h * d;
        let mut index = Vec::with_capacity(b * s * k);
        for bi in 0..b {
            for hi in 0..h {
                for si in 0..s {
                    for di in 0..d {
                        index.push((bi * s + si) * k + hi * d + di);
                    }
                }
            }
        }
        tape.gather(x, index, vec![b * h, s, d])
    }

    // [b·h × s × d] → [b × s × k]
    fn merge_heads(&self, tape: &mut Tape, x: Var, b: usize, s: usize) -> Result<Var> {
        let (h, d) = (self.num_heads, self.head_dim());
        let mut index = Vec::with_capacity(b * s * h * d);
        for bi in 0..b {
            for si in 0..s {
                for hi in 0..h {
                    for di in 0..d {
                        index.push(((bi * h + hi) * s + si) * d + di);
                    }
                }
            }
        }
        tape.gather(x, index, vec![b, s, h * d])
    }

    /// Attends from `q_in` to `k_in`/`v_in`. The output has the shape of `q_in`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        mask: Option<&AttnMask>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let q_shape = tape.value(q_in).shape().to_vec();
        let (b, sq, k) = batch_dims(&q_shape)?;
        let (bk, sk, kk) = batch_dims(tape.value(k_in).shape())?;
        if bk != b || kk != k || tape.value(v_in).shape() != tape.value(k_in).shape() {
            return Err(Error::Shape {
                op: "attention",
                lhs: q_shape,
                rhs: tape.value(k_in).shape().to_vec(),
            });
        }
        if k != self.model_dim() {
            return Err(Error::Shape {
                op: "attention",
                lhs: q_shape,
                rhs: vec![self.model_dim()],
            });
        }
        let q = self.wq.forward(tape, q_in)?;
        let kp = self.wk.forward(tape, k_in)?;
        let v = self.wv.forward(tape, v_in)?;
        let q = self.split_heads(tape, q, b, sq)?;
        let kp = self.split_heads(tape, kp, b, sk)?;
        let v = self.split_heads(tape, v, b, sk)?;

        let scores = tape.matmul_nt(q, kp)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt())?;
        let allowed = mask.map(|m| m.expand(b, self.num_heads, sq, sk)).transpose()?;
        let weights = tape.softmax_rows(scores, allowed.as_deref())?;
        let weights = ctx.dropout(tape, weights)?;
        let heads = tape.matmul(weights, v)?;
        let merged = self.merge_heads(tape, heads, b, sq)?;
        let merged = tape.reshape(merged, q_shape)?;
        self.wo.forward(tape, merged)
    }
}

impl Parameterized for MultiHeadAttention {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.wq.collect_params(&join_name(prefix, "q"), out);
        self.wk.collect_params(&join_name(prefix, "k"), out);
        self.wv.collect_params(&join_name(prefix, "v"), out);
        self.wo.collect_params(&join_name(prefix, "o"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.wq.collect_params_mut(&join_name(prefix, "q"), out);
        self.wk.collect_params_mut(&join_name(prefix, "k"), out);
        self.wv.collect_params_mut(&join_name(prefix, "v"), out);
        self.wo.collect_params_mut(&join_name(prefix, "o"), out);
    }
}

/// Position-wise `lin2(ReLU(lin1(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub lin1: LinearLayer,
    pub lin2: LinearLayer,
}

impl FeedForward {
    pub fn new(k: usize, f: usize, rng: &mut impl Rng) -> Self {
        Self {
            lin1: LinearLayer::new(k, f, rng),
            lin2: LinearLayer::new(f, k, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.lin1.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.lin2.forward(tape, h)
    }
}

impl Parameterized for FeedForward {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.lin1.collect_params(&join_name(prefix, "lin1"), out);
        self.lin2.collect_params(&join_name(prefix, "lin2"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.lin1.collect_params_mut(&join_name(prefix, "lin1"), out);
        self.lin2.collect_params_mut(&join_name(prefix, "lin2"), out);
    }
}

/// Fixed sine/cosine position table; holds no trainable parameters.
#[derive(Clone, Debug)]
pub struct SinusoidalPositionalEncoding {
    table: Tensor,
}

impl SinusoidalPositionalEncoding {
    pub fn new(max_len: usize, k: usize) -> Self {
        let mut data = vec![0.0; max_len * k];
        for pos in 0..max_len {
            for i in 0..k {
                let exponent = (2 * (i / 2)) as f64 / k as f64;
                let angle = pos as f64 / 10_000f64.powf(exponent);
                data[pos * k + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        Self {
            table: Tensor::from_parts(vec![max_len, k], data),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.table.shape()[0]
    }

    /// Position rows `0..seq`, tiled over `batch`: shape `[batch × seq × k]`.
    pub fn slice(&self, batch: usize, seq: usize) -> Result<Tensor> {
        if seq > self.max_len() {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: self.max_len(),
            });
        }
        let k = self.table.last_dim();
        let rows = &self.table.data()[..seq * k];
        let data = rows.repeat(batch);
        Ok(Tensor::from_parts(vec![batch, seq, k], data))
    }
}

/// Mean label-smoothed cross-entropy over non-padding positions.
///
/// `logits` is `[N × V]` (any leading shape with `N` rows), `targets` holds
/// `N` ids, and positions whose target equals `pad_id` are skipped.
pub fn label_smoothed_cross_entropy(
    tape: &mut Tape,
    logits: Var,
    targets: &[u32],
    smoothing: f64,
    pad_id: u32,
) -> Result<Var> {
    let targets: Vec<Option<usize>> = targets.iter().map(|&t| (t != pad_id).then_some(t as usize)).collect();
    tape.cross_entropy(logits, &targets, smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn eval_linear(layer: &LinearLayer, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let y = layer.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn linear_examples() {
        let id = LinearLayer::from_tensors(Tensor::eye(2), Tensor::zeros([2])).unwrap();
        let y = eval_linear(&id, Tensor::from_vec(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let layer = LinearLayer::from_tensors(
            Tensor::from_rows(&[&[1.0, 1.0]]).unwrap(),
            Tensor::from_vec(vec![0.5]).unwrap(),
        )
        .unwrap();
        let y = eval_linear(&layer, Tensor::from_vec(vec![1.0, 2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[3.5]);

        assert!(eval_linear(&layer, Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap()).is_err());
    }

    #[test]
    fn parameter_counts_by_enumeration() {
        let mut r = rng();
        let (k, f) = (12, 20);
        assert_eq!(LinearLayer::new(k, f, &mut r).num_params(), k * f + f);
        assert_eq!(LayerNormLayer::new(k, 1e-5).num_params(), 2 * k);
        assert_eq!(
            MultiHeadAttention::new(k, 3, &mut r).unwrap().num_params(),
            4 * (k * k + k)
        );
        assert_eq!(FeedForward::new(k, f, &mut r).num_params(), k * f + f + f * k + k);
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(MultiHeadAttention::new(10, 3, &mut rng()).is_err());
        assert!(MultiHeadAttention::new(10, 0, &mut rng()).is_err());
    }

    fn eval_norm(x: Tensor) -> Tensor {
        let ln = LayerNormLayer::new(x.last_dim(), 1e-5);
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let y = ln.forward(&mut tape, x).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn layer_norm_examples() {
        let y = eval_norm(Tensor::from_vec(vec![1.0, -1.0]).unwrap());
        assert_abs_diff_eq!(y.data()[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(y.data()[1], -1.0, epsilon = 1e-5);

        let y = eval_norm(Tensor::full([5], 3.25));
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let x = Tensor::uniform([4, 64], 3.0, &mut rng());
        let y = eval_norm(x);
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_rejects_wrong_width() {
        let ln = LayerNormLayer::new(3, 1e-5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 4]));
        assert!(ln.forward(&mut tape, x).is_err());
    }

    fn identity_mha(k: usize) -> MultiHeadAttention {
        let lin = || LinearLayer::from_tensors(Tensor::eye(k), Tensor::zeros([k])).unwrap();
        MultiHeadAttention {
            wq: lin(),
            wk: lin(),
            wv: lin(),
            wo: lin(),
            num_heads: 1,
        }
    }

    #[test]
    fn single_position_attention_returns_value() {
        let mha = identity_mha(4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
        let y = mha.forward(&mut tape, x, x, x, None, &mut ForwardCtx::eval()).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-15);
    }

    #[test]
    fn attention_output_shape() {
        let mha = MultiHeadAttention::new(8, 2, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform([7, 8], 1.0, &mut rng()));
        let y = mha
            .forward(&mut tape, x, x, x, Some(&AttnMask::causal(7)), &mut ForwardCtx::eval())
            .unwrap();
        assert_eq!(tape.value(y).shape(), &[7, 8]);
    }

    #[test]
    fn causal_attention_is_prefix_invariant() {
        let k = 4;
        let mha = MultiHeadAttention::new(k, 2, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        for seq in 1..=8 {
            let base = Tensor::uniform([seq, k], 1.0, &mut r);
            let run = |x: &Tensor| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let y = mha
                    .forward(
                        &mut tape,
                        xv,
                        xv,
                        xv,
                        Some(&AttnMask::causal(seq)),
                        &mut ForwardCtx::eval(),
                    )
                    .unwrap();
                tape.value(y).clone()
            };
            let y0 = run(&base);
            for t in 0..seq {
                let mut changed = base.clone();
                for j in t * k..seq * k {
                    changed.data_mut()[j] += 0.75;
                }
                let y1 = run(&changed);
                assert_eq!(&y0.data()[..t * k], &y1.data()[..t * k], "seq {seq}, t {t}");
            }
        }
    }

    #[test]
    fn mask_shape_is_checked() {
        let mha = MultiHeadAttention::new(4, 2, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3, 4]));
        let r = mha.forward(&mut tape, x, x, x, Some(&AttnMask::causal(2)), &mut ForwardCtx::eval());
        assert!(r.is_err());
    }

    #[test]
    fn positional_table_values() {
        let pe = SinusoidalPositionalEncoding::new(4, 6);
        assert_eq!(pe.table().row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_abs_diff_eq!(pe.table().row(1)[0], 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(
            pe.table().row(1)[3],
            (1.0 / 10_000f64.powf(2.0 / 6.0)).cos(),
            epsilon = 1e-15
        );
        assert!(pe.slice(1, 5).is_err());
        assert_eq!(pe.slice(2, 3).unwrap().shape(), &[2, 3, 6]);
    }

    fn ce(logits: Tensor, targets: &[u32], smoothing: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let loss = label_smoothed_cross_entropy(&mut tape, l, targets, smoothing, 0)?;
        Ok(tape.value(loss).data()[0])
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 7;
        let loss = ce(Tensor::zeros([3, v]), &[1, 4, 6], 0.0).unwrap();
        assert_abs_diff_eq!(loss, (v as f64).ln(), epsilon = 1e-12);

        let loss = ce(Tensor::zeros([1, 2]), &[1], 0.1).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);

        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0] {
            let loss = ce(Tensor::new([1, 3], vec![0.0, margin, 0.0]).unwrap(), &[1], 0.0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-16);

        // pad rows contribute nothing
        let with_pad = ce(Tensor::new([2, 2], vec![0.0, 3.0, 9.0, -9.0]).unwrap(), &[1, 0], 0.0).unwrap();
        let alone = ce(Tensor::new([1, 2], vec![0.0, 3.0]).unwrap(), &[1], 0.0).unwrap();
        assert_eq!(with_pad, alone);

        assert!(matches!(
            ce(Tensor::zeros([2, 3]), &[0, 0], 0.1),
            Err(Error::AllPadding)
        ));
    }
}
