//! Encoder-decoder assembly.
//!
//! Post-norm layers. Every sublayer output passes through dropout and is then
//! merged with its input either by a plain add or by a gated residual
//! connection, followed by layer normalization. With `use_eau`, each
//! attention output is first refined by an evaluator-adjuster unit:
//!
//! ```text
//! encoder:  x → MHA → [EAU] → add/gate + norm → FFN → add/gate + norm
//! decoder:  x → self-MHA → [EAU] → add/gate + norm
//!             → cross-MHA → [EAU] → add/gate + norm → FFN → add/gate + norm
//! ```

mod checkpoint;
mod config;

pub use checkpoint::{
    decode_model, encode_model, load_checkpoint, save_checkpoint, TensorFile, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, ReferenceSize, Variant, REFERENCE_SRC_VOCAB, REFERENCE_TGT_VOCAB};

use rand::Rng;

use crate::data::{Batch, BOS_ID, EOS_ID, PAD_ID};
use crate::eau::EvaluatorAdjusterUnit;
use crate::error::{Error, Result};
use crate::grc::GatedResidualConnection;
use crate::layers::{
    label_smoothed_cross_entropy, AttnMask, FeedForward, ForwardCtx, LayerNormLayer, LinearLayer, MultiHeadAttention,
    SinusoidalPositionalEncoding,
};
use crate::optim::{rng_stream, INIT_STREAM};
use crate::tape::{Tape, Var};
use crate::tensor::{join_name, Param, ParamKind, Parameterized, Tensor};

/// The "add & norm" step after a sublayer, optionally gated.
#[derive(Clone, Debug)]
pub struct Residual {
    pub gate: Option<GatedResidualConnection>,
    pub norm: LayerNormLayer,
}

impl Residual {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let gate = cfg
            .use_grc
            .then(|| GatedResidualConnection::new(cfg.model_dim, rng, cfg.gate_bias_init))
            .transpose()?;
        Ok(Self {
            gate,
            norm: LayerNormLayer::new(cfg.model_dim, cfg.layer_norm_eps),
        })
    }

    fn forward(&self, tape: &mut Tape, residual: Var, sublayer: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let sublayer = ctx.dropout(tape, sublayer)?;
        let merged = match &self.gate {
            Some(g) => g.forward(tape, residual, sublayer, ctx)?,
            None => tape.add(residual, sublayer)?,
        };
        self.norm.forward(tape, merged)
    }
}

impl Parameterized for Residual {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        if let Some(g) = &self.gate {
            g.collect_params(&join_name(prefix, "grc"), out);
        }
        self.norm.collect_params(&join_name(prefix, "norm"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        if let Some(g) = &mut self.gate {
            g.collect_params_mut(&join_name(prefix, "grc"), out);
        }
        self.norm.collect_params_mut(&join_name(prefix, "norm"), out);
    }
}

fn maybe_eau(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Option<EvaluatorAdjusterUnit>> {
    cfg.use_eau
        .then(|| EvaluatorAdjusterUnit::new(cfg.model_dim, rng))
        .transpose()
}

fn apply_eau(eau: &Option<EvaluatorAdjusterUnit>, tape: &mut Tape, x: Var) -> Result<Var> {
    match eau {
        Some(unit) => unit.forward(tape, x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_attn_eau: Option<EvaluatorAdjusterUnit>,
    pub self_attn_residual: Residual,
    pub ffn: FeedForward,
    pub ffn_residual: Residual,
}

impl EncoderLayer {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(cfg.model_dim, cfg.num_heads, rng)?,
            self_attn_eau: maybe_eau(cfg, rng)?,
            self_attn_residual: Residual::new(cfg, rng)?,
            ffn: FeedForward::new(cfg.model_dim, cfg.ffn_dim, rng),
            ffn_residual: Residual::new(cfg, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var, mask: &AttnMask, ctx: &mut ForwardCtx) -> Result<Var> {
        let a = self.self_attn.forward(tape, x, x, x, Some(mask), ctx)?;
        let a = apply_eau(&self.self_attn_eau, tape, a)?;
        let x = self.self_attn_residual.forward(tape, x, a, ctx)?;
        let f = self.ffn.forward(tape, x)?;
        self.ffn_residual.forward(tape, x, f, ctx)
    }
}

impl Parameterized for EncoderLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.self_attn.collect_params(&join_name(prefix, "self_attn"), out);
        if let Some(e) = &self.self_attn_eau {
            e.collect_params(&join_name(prefix, "self_attn_eau"), out);
        }
        self.self_attn_residual
            .collect_params(&join_name(prefix, "self_attn_residual"), out);
        self.ffn.collect_params(&join_name(prefix, "ffn"), out);
        self.ffn_residual
            .collect_params(&join_name(prefix, "ffn_residual"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.self_attn.collect_params_mut(&join_name(prefix, "self_attn"), out);
        if let Some(e) = &mut self.self_attn_eau {
            e.collect_params_mut(&join_name(prefix, "self_attn_eau"), out);
        }
        self.self_attn_residual
            .collect_params_mut(&join_name(prefix, "self_attn_residual"), out);
        self.ffn.collect_params_mut(&join_name(prefix, "ffn"), out);
        self.ffn_residual
            .collect_params_mut(&join_name(prefix, "ffn_residual"), out);
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_attn_eau: Option<EvaluatorAdjusterUnit>,
    pub self_attn_residual: Residual,
    pub cross_attn: MultiHeadAttention,
    pub cross_attn_eau: Option<EvaluatorAdjusterUnit>,
    pub cross_attn_residual: Residual,
    pub ffn: FeedForward,
    pub ffn_residual: Residual,
}

impl DecoderLayer {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(cfg.model_dim, cfg.num_heads, rng)?,
            self_attn_eau: maybe_eau(cfg, rng)?,
            self_attn_residual: Residual::new(cfg, rng)?,
            cross_attn: MultiHeadAttention::new(cfg.model_dim, cfg.num_heads, rng)?,
            cross_attn_eau: maybe_eau(cfg, rng)?,
            cross_attn_residual: Residual::new(cfg, rng)?,
            ffn: FeedForward::new(cfg.model_dim, cfg.ffn_dim, rng),
            ffn_residual: Residual::new(cfg, rng)?,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        memory: Var,
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, x, x, x, Some(self_mask), ctx)?;
        let a = apply_eau(&self.self_attn_eau, tape, a)?;
        let x = self.self_attn_residual.forward(tape, x, a, ctx)?;
        let c = self
            .cross_attn
            .forward(tape, x, memory, memory, Some(cross_mask), ctx)?;
        let c = apply_eau(&self.cross_attn_eau, tape, c)?;
        let x = self.cross_attn_residual.forward(tape, x, c, ctx)?;
        let f = self.ffn.forward(tape, x)?;
        self.ffn_residual.forward(tape, x, f, ctx)
    }
}

impl Parameterized for DecoderLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.self_attn.collect_params(&join_name(prefix, "self_attn"), out);
        if let Some(e) = &self.self_attn_eau {
            e.collect_params(&join_name(prefix, "self_attn_eau"), out);
        }
        self.self_attn_residual
            .collect_params(&join_name(prefix, "self_attn_residual"), out);
        self.cross_attn.collect_params(&join_name(prefix, "cross_attn"), out);
        if let Some(e) = &self.cross_attn_eau {
            e.collect_params(&join_name(prefix, "cross_attn_eau"), out);
        }
        self.cross_attn_residual
            .collect_params(&join_name(prefix, "cross_attn_residual"), out);
        self.ffn.collect_params(&join_name(prefix, "ffn"), out);
        self.ffn_residual
            .collect_params(&join_name(prefix, "ffn_residual"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.self_attn.collect_params_mut(&join_name(prefix, "self_attn"), out);
        if let Some(e) = &mut self.self_attn_eau {
            e.collect_params_mut(&join_name(prefix, "self_attn_eau"), out);
        }
        self.self_attn_residual
            .collect_params_mut(&join_name(prefix, "self_attn_residual"), out);
        self.cross_attn
            .collect_params_mut(&join_name(prefix, "cross_attn"), out);
        if let Some(e) = &mut self.cross_attn_eau {
            e.collect_params_mut(&join_name(prefix, "cross_attn_eau"), out);
        }
        self.cross_attn_residual
            .collect_params_mut(&join_name(prefix, "cross_attn_residual"), out);
        self.ffn.collect_params_mut(&join_name(prefix, "ffn"), out);
        self.ffn_residual
            .collect_params_mut(&join_name(prefix, "ffn_residual"), out);
    }
}

/// Per-component parameter totals.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct ParamBreakdown {
    pub src_embedding: usize,
    pub tgt_embedding: usize,
    pub generator: usize,
    pub encoder_layer: usize,
    pub decoder_layer: usize,
    pub eau_units: usize,
    pub eau_total: usize,
    pub grc_units: usize,
    pub grc_total: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: ModelConfig,
    pub src_embedding: Param,
    pub tgt_embedding: Param,
    positional: SinusoidalPositionalEncoding,
    pub encoder_layers: Vec<EncoderLayer>,
    pub decoder_layers: Vec<DecoderLayer>,
    pub generator: LinearLayer,
}

fn rectangular(what: &'static str, rows: &[Vec<u32>]) -> Result<(usize, usize)> {
    let b = rows.len();
    let s = rows.first().map_or(0, Vec::len);
    if b == 0 || s == 0 {
        return Err(Error::InvalidTensor(format!("{what} batch is empty")));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != s) {
        return Err(Error::LengthMismatch {
            what,
            left: s,
            right: r.len(),
        });
    }
    Ok((b, s))
}

impl TransformerModel {
    /// Builds and initializes a model; all randomness comes from the
    /// configuration seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_stream(config.seed, INIT_STREAM, 0);
        let k = config.model_dim;
        let emb_bound = 1.0 / (k as f64).sqrt();
        let src_embedding = Param::new(
            Tensor::uniform([config.src_vocab_size, k], emb_bound, &mut rng),
            ParamKind::Embedding,
        );
        let tgt_embedding = Param::new(
            Tensor::uniform([config.tgt_vocab_size, k], emb_bound, &mut rng),
            ParamKind::Embedding,
        );
        let encoder_layers = (0..config.num_layers)
            .map(|_| EncoderLayer::new(&config, &mut rng))
            .collect::<Result<_>>()?;
        let decoder_layers = (0..config.num_layers)
            .map(|_| DecoderLayer::new(&config, &mut rng))
            .collect::<Result<_>>()?;
        let generator = LinearLayer::new(k, config.tgt_vocab_size, &mut rng);
        Ok(Self {
            positional: SinusoidalPositionalEncoding::new(config.max_seq_len, k),
            config,
            src_embedding,
            tgt_embedding,
            encoder_layers,
            decoder_layers,
            generator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    pub fn eau_units(&self) -> usize {
        self.encoder_layers
            .iter()
            .map(|l| l.self_attn_eau.is_some() as usize)
            .sum::<usize>()
            + self
                .decoder_layers
                .iter()
                .map(|l| l.self_attn_eau.is_some() as usize + l.cross_attn_eau.is_some() as usize)
                .sum::<usize>()
    }

    pub fn grc_units(&self) -> usize {
        let gated = |r: &Residual| r.gate.is_some() as usize;
        self.encoder_layers
            .iter()
            .map(|l| gated(&l.self_attn_residual) + gated(&l.ffn_residual))
            .sum::<usize>()
            + self
                .decoder_layers
                .iter()
                .map(|l| gated(&l.self_attn_residual) + gated(&l.cross_attn_residual) + gated(&l.ffn_residual))
                .sum::<usize>()
    }

    pub fn param_breakdown(&self) -> ParamBreakdown {
        let count = |prefix: &str, needle: &str| {
            self.named_params()
                .iter()
                .filter(|(n, _)| n.starts_with(prefix) && n.contains(needle))
                .map(|(_, p)| p.numel())
                .sum::<usize>()
        };
        ParamBreakdown {
            src_embedding: self.src_embedding.numel(),
            tgt_embedding: self.tgt_embedding.numel(),
            generator: self.generator.num_params(),
            encoder_layer: self.encoder_layers.first().map_or(0, |l| l.num_params()),
            decoder_layer: self.decoder_layers.first().map_or(0, |l| l.num_params()),
            eau_units: self.eau_units(),
            eau_total: count("", "_eau."),
            grc_units: self.grc_units(),
            grc_total: count("", ".grc."),
            total: self.count_params(),
        }
    }

    fn embed(&self, tape: &mut Tape, table: &Param, ids: &[Vec<u32>], ctx: &mut ForwardCtx) -> Result<Var> {
        let (b, s) = rectangular("token", ids)?;
        if s > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.config.max_seq_len,
            });
        }
        let k = self.config.model_dim;
        let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
        let t = tape.param(table);
        let e = tape.embedding(t, &flat)?;
        let e = tape.reshape(e, [b, s, k])?;
        let e = if self.config.scale_embeddings {
            tape.scale(e, (k as f64).sqrt())?
        } else {
            e
        };
        let pos = tape.constant(self.positional.slice(b, s)?);
        let x = tape.add(e, pos)?;
        ctx.dropout(tape, x)
    }

    /// Encoder stack; returns the memory `[batch × src_len × k]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        src: &[Vec<u32>],
        src_pad_mask: &[Vec<bool>],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (_, s) = rectangular("source", src)?;
        check_mask_shape(src, src_pad_mask)?;
        let mask = AttnMask::key_padding(src_pad_mask, s);
        let mut x = self.embed(tape, &self.src_embedding, src, ctx)?;
        for layer in &self.encoder_layers {
            x = layer.forward(tape, x, &mask, ctx)?;
        }
        Ok(x)
    }

    /// Decoder stack plus generator; returns logits `[batch × tgt_len × V_tgt]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        memory: Var,
        src_pad_mask: &[Vec<bool>],
        tgt_in: &[Vec<u32>],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let (_, t) = rectangular("target", tgt_in)?;
        let self_mask = AttnMask::causal(t);
        let cross_mask = AttnMask::key_padding(src_pad_mask, t);
        let mut x = self.embed(tape, &self.tgt_embedding, tgt_in, ctx)?;
        for layer in &self.decoder_layers {
            x = layer.forward(tape, x, memory, &self_mask, &cross_mask, ctx)?;
        }
        self.generator.forward(tape, x)
    }

    /// Teacher-forced logits for every target position.
    ///
    /// `src_pad_mask[b][j]` marks padded source positions; they are excluded
    /// from encoder self-attention and from cross-attention. Target positions
    /// only see earlier positions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        src: &[Vec<u32>],
        src_pad_mask: &[Vec<bool>],
        tgt_in: &[Vec<u32>],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if src.len() != tgt_in.len() {
            return Err(Error::LengthMismatch {
                what: "source vs target batch",
                left: src.len(),
                right: tgt_in.len(),
            });
        }
        let memory = self.encode(tape, src, src_pad_mask, ctx)?;
        self.decode(tape, memory, src_pad_mask, tgt_in, ctx)
    }

    /// Logits for a single unpadded pair: `[tgt_len × V_tgt]`.
    pub fn forward_pair(&self, src: &[u32], tgt_in: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let logits = self.forward(
            &mut tape,
            &[src.to_vec()],
            &[vec![false; src.len()]],
            &[tgt_in.to_vec()],
            &mut ForwardCtx::eval(),
        )?;
        let v = self.config.tgt_vocab_size;
        tape.value(logits).clone().reshape([tgt_in.len(), v])
    }

    /// Mean label-smoothed loss of a batch; also returns the logits.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &Batch, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let logits = self.forward(tape, &batch.src, &batch.src_pad_mask, &batch.tgt_in, ctx)?;
        let targets: Vec<u32> = batch.tgt_out.iter().flatten().copied().collect();
        let loss = label_smoothed_cross_entropy(tape, logits, &targets, self.config.label_smoothing, PAD_ID)?;
        Ok((loss, logits))
    }

    /// Greedy decoding from BOS: appends the arg-max token until EOS is
    /// produced or `max_len` tokens have been emitted. The returned ids
    /// exclude BOS and include EOS when it was produced.
    pub fn greedy_decode(&self, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
        if max_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: max_len,
                max: self.config.max_seq_len,
            });
        }
        let src_rows = [src.to_vec()];
        let pad = [vec![false; src.len()]];
        let mut tape = Tape::new();
        let memory = self.encode(&mut tape, &src_rows, &pad, &mut ForwardCtx::eval())?;
        let memory = tape.value(memory).clone();

        let v = self.config.tgt_vocab_size;
        let mut out = Vec::with_capacity(max_len);
        while out.len() < max_len {
            let mut prefix = Vec::with_capacity(out.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&out);
            let mut tape = Tape::new();
            let mem = tape.constant(memory.clone());
            let logits = self.decode(&mut tape, mem, &pad, &[prefix], &mut ForwardCtx::eval())?;
            let data = tape.value(logits).data();
            let last = &data[data.len() - v..];
            let next = argmax(last) as u32;
            out.push(next);
            if next == EOS_ID {
                break;
            }
        }
        Ok(out)
    }
}

fn check_mask_shape(ids: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<()> {
    let ok = ids.len() == mask.len() && ids.iter().zip(mask).all(|(a, b)| a.len() == b.len());
    if ok {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            what: "source ids vs pad mask",
            left: ids.len(),
            right: mask.len(),
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Parameterized for TransformerModel {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join_name(prefix, "src_embedding"), &self.src_embedding));
        out.push((join_name(prefix, "tgt_embedding"), &self.tgt_embedding));
        for (i, l) in self.encoder_layers.iter().enumerate() {
            l.collect_params(&join_name(prefix, &format!("encoder.{i}")), out);
        }
        for (i, l) in self.decoder_layers.iter().enumerate() {
            l.collect_params(&join_name(prefix, &format!("decoder.{i}")), out);
        }
        self.generator.collect_params(&join_name(prefix, "generator"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join_name(prefix, "src_embedding"), &mut self.src_embedding));
        out.push((join_name(prefix, "tgt_embedding"), &mut self.tgt_embedding));
        for (i, l) in self.encoder_layers.iter_mut().enumerate() {
            l.collect_params_mut(&join_name(prefix, &format!("encoder.{i}")), out);
        }
        for (i, l) in self.decoder_layers.iter_mut().enumerate() {
            l.collect_params_mut(&join_name(prefix, &format!("decoder.{i}")), out);
        }
        self.generator.collect_params_mut(&join_name(prefix, "generator"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eau::eau_param_count;
    use crate::grc::grc_param_count;

    fn micro(variant: Variant) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            max_seq_len: 10,
            model_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            dropout: 0.0,
            use_eau: false,
            use_grc: false,
            src_vocab_size: 13,
            tgt_vocab_size: 11,
            label_smoothing: 0.1,
            seed: 3,
            layer_norm_eps: 1e-5,
            scale_embeddings: true,
            gate_bias_init: 0.0,
        }
        .with_variant(variant)
    }

    #[test]
    fn baseline_has_no_addons() {
        let m = TransformerModel::new(micro(Variant::Baseline)).unwrap();
        assert_eq!(m.eau_units(), 0);
        assert_eq!(m.grc_units(), 0);
        assert!(m
            .named_params()
            .iter()
            .all(|(n, _)| !n.contains("eau") && !n.contains("grc")));
    }

    #[test]
    fn unit_counts_follow_placement() {
        let cfg = ModelConfig {
            num_layers: 3,
            ..micro(Variant::Eau)
        };
        assert_eq!(TransformerModel::new(cfg).unwrap().eau_units(), 9);
        let cfg = micro(Variant::Grc);
        assert_eq!(TransformerModel::new(cfg).unwrap().grc_units(), 10);
    }

    #[test]
    fn delta_matches_unit_arithmetic() {
        let base = TransformerModel::new(micro(Variant::Baseline)).unwrap();
        let both = TransformerModel::new(micro(Variant::EauGrc)).unwrap();
        let (l, k) = (2, 8);
        assert_eq!(
            both.count_params() - base.count_params(),
            l * 3 * eau_param_count(k) + l * 5 * grc_param_count(k)
        );
        let b = both.param_breakdown();
        assert_eq!(b.eau_total, 6 * eau_param_count(k));
        assert_eq!(b.grc_total, 10 * grc_param_count(k));
        assert_eq!(b.total, both.count_params());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = TransformerModel::new(micro(Variant::EauGrc)).unwrap();
        let b = TransformerModel::new(micro(Variant::EauGrc)).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(na, &nb);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn forward_shape_and_length_limit() {
        let m = TransformerModel::new(micro(Variant::EauGrc)).unwrap();
        let logits = m.forward_pair(&[2, 5, 6, 3], &[2, 7, 8]).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
        assert!(logits.is_finite());
        let long: Vec<u32> = vec![5; 11];
        assert!(matches!(
            m.forward_pair(&long, &[2]),
            Err(Error::SequenceTooLong { len: 11, max: 10 })
        ));
        assert!(matches!(
            m.forward_pair(&[2, 40, 3], &[2]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn greedy_decode_contract() {
        let m = TransformerModel::new(micro(Variant::Grc)).unwrap();
        for max_len in [1, 4, 10] {
            let out = m.greedy_decode(&[2, 5, 9, 3], max_len).unwrap();
            assert!(out.len() <= max_len);
            assert!(out.last() == Some(&EOS_ID) || out.len() == max_len);
            assert_eq!(out, m.greedy_decode(&[2, 5, 9, 3], max_len).unwrap());
        }
        assert!(m.greedy_decode(&[2, 3], 11).is_err());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, -1.0]), 1);
    }
}
