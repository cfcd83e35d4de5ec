//! Encoder-decoder transformers with evaluator-adjuster units and gated
//! residual connections, trained by a small reverse-mode autodiff engine in
//! `f64`.
//!
//! ```
//! use gatedformer::{ModelConfig, ReferenceSize, TransformerModel, Variant};
//!
//! let cfg = ModelConfig::reference(ReferenceSize::L2K128, Variant::EauGrc);
//! assert_eq!(cfg.num_layers, 2);
//! let tiny = ModelConfig { model_dim: 8, ffn_dim: 16, num_heads: 2, ..cfg };
//! let model = TransformerModel::new(tiny).unwrap();
//! assert_eq!(model.eau_units(), 6);
//! ```

pub mod data;
pub mod eau;
pub mod error;
pub mod grc;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use data::{Batch, EncodedPair, SynthMode, TokenPair, Vocab, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
pub use eau::{eau_param_count, EvaluatorAdjusterUnit};
pub use error::{CheckpointError, Error, Result};
pub use grc::{grc_param_count, GatedResidualConnection};
pub use layers::ForwardCtx;
pub use metrics::{corpus_bleu, token_accuracy, BleuReport};
pub use model::{
    load_checkpoint, save_checkpoint, ModelConfig, ParamBreakdown, ReferenceSize, TransformerModel, Variant,
};
pub use optim::{rng_stream, AdamW, AdamWConfig, LrSchedule};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Param, ParamKind, Parameterized, Tensor};
pub use train::{RunPaths, TrainConfig, Trainer};
pub use verify::{gradcheck_component, Component, GradCheckReport};
