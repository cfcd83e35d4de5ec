use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::DEFAULT_LAYER_NORM_EPS;

/// Hyperparameters of an encoder-decoder model.
///
/// Everything that changes the architecture or the training objective must be
/// spelled out; only numerical details carry defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder layers, and separately decoder layers.
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub dropout: f64,
    pub use_eau: bool,
    pub use_grc: bool,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    /// Multiply embeddings by `√model_dim` before adding positions.
    #[serde(default = "default_true")]
    pub scale_embeddings: bool,
    #[serde(default)]
    pub gate_bias_init: f64,
}

fn default_eps() -> f64 {
    DEFAULT_LAYER_NORM_EPS
}

fn default_true() -> bool {
    true
}

/// Which of the two add-on mechanisms a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Eau,
    Grc,
    EauGrc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Eau, Variant::Grc, Variant::EauGrc];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Eau => (true, false),
            Variant::Grc => (false, true),
            Variant::EauGrc => (true, true),
        }
    }

    pub fn from_flags(use_eau: bool, use_grc: bool) -> Self {
        match (use_eau, use_grc) {
            (false, false) => Variant::Baseline,
            (true, false) => Variant::Eau,
            (false, true) => Variant::Grc,
            (true, true) => Variant::EauGrc,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Eau => "eau",
            Variant::Grc => "grc",
            Variant::EauGrc => "eau+grc",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Source and target vocabulary sizes that reproduce the reference
/// parameter counts.
pub const REFERENCE_SRC_VOCAB: usize = 5893;
pub const REFERENCE_TGT_VOCAB: usize = 7853;

/// The three reference size settings `(layers, max_seq_len, model_dim, ffn_dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceSize {
    L3K256,
    L2K256,
    L2K128,
}

impl ReferenceSize {
    pub const ALL: [ReferenceSize; 3] = [ReferenceSize::L3K256, ReferenceSize::L2K256, ReferenceSize::L2K128];

    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            ReferenceSize::L3K256 => (3, 128, 256, 1024),
            ReferenceSize::L2K256 => (2, 128, 256, 1024),
            ReferenceSize::L2K128 => (2, 64, 128, 512),
        }
    }
}

impl ModelConfig {
    /// Reference-size configuration with dropout 0.1 and label smoothing 0.1.
    /// Heads: 8 at `k = 256`, 4 at `k = 128`.
    pub fn reference(size: ReferenceSize, variant: Variant) -> Self {
        let (l, n, k, f) = size.dims();
        let (use_eau, use_grc) = variant.flags();
        Self {
            num_layers: l,
            max_seq_len: n,
            model_dim: k,
            ffn_dim: f,
            num_heads: if k >= 256 { 8 } else { 4 },
            dropout: 0.1,
            use_eau,
            use_grc,
            src_vocab_size: REFERENCE_SRC_VOCAB,
            tgt_vocab_size: REFERENCE_TGT_VOCAB,
            label_smoothing: 0.1,
            seed: 0,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            scale_embeddings: true,
            gate_bias_init: 0.0,
        }
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.use_eau, self.use_grc)
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        (self.use_eau, self.use_grc) = variant.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        // PAD, UNK, BOS and EOS occupy the first four ids
        for (name, v) in [
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
        ] {
            if v < 4 {
                return fail(format!("{name} must be at least 4, got {v}"));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "num_heads {} must divide model_dim {}",
                self.num_heads, self.model_dim
            ));
        }
        if self.use_eau && !self.model_dim.is_multiple_of(2) {
            return fail(format!("model_dim {} must be even when use_eau is set", self.model_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 || !self.gate_bias_init.is_finite() {
            return fail("layer_norm_eps must be positive and gate_bias_init finite".into());
        }
        Ok(())
    }
}
