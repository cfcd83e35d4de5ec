use std::path::{Path, PathBuf};

use gatedformer::data::{SynthMode, Vocab};
use gatedformer::train::TrainConfig;
use gatedformer::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_DIR_ENV: &str = "GATEDFORMER_RUN_DIR";
pub const SRC_VOCAB_FILE: &str = "src.vocab";
pub const TGT_VOCAB_FILE: &str = "tgt.vocab";
pub const EFFECTIVE_CONFIG_FILE: &str = "config.json";

/// Everything a training run needs. The model seed drives initialization,
/// dropout, shuffling and synthetic data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Line-aligned text files and the vocabularies built from them.
    Parallel {
        train_src: PathBuf,
        train_tgt: PathBuf,
        val_src: PathBuf,
        val_tgt: PathBuf,
        src_vocab: PathBuf,
        tgt_vocab: PathBuf,
    },
    /// Random symbol strings copied or reversed.
    Synthetic {
        vocab_size: usize,
        train_pairs: usize,
        val_pairs: usize,
        min_len: usize,
        max_len: usize,
        mode: SynthMode,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Receives `config.json`, `loss.csv`, `best.ckpt`, `final.ckpt`,
    /// `state.json` and both vocabularies. Overridden by `GATEDFORMER_RUN_DIR`.
    pub run_dir: PathBuf,
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: Self = read_json(path)?;
        if let Some(dir) = std::env::var_os(RUN_DIR_ENV) {
            cfg.output.run_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if let DataConfig::Synthetic {
            vocab_size,
            train_pairs,
            val_pairs,
            min_len,
            max_len,
            ..
        } = self.data
        {
            if vocab_size != self.model.src_vocab_size || vocab_size != self.model.tgt_vocab_size {
                return Err(CliError::Config(format!(
                    "synthetic vocab_size {vocab_size} must equal both model vocabulary sizes"
                )));
            }
            if train_pairs == 0 || val_pairs == 0 || min_len == 0 || min_len > max_len {
                return Err(CliError::Config(
                    "synthetic data needs positive pair counts and 0 < min_len <= max_len".into(),
                ));
            }
            if max_len + 2 > self.model.max_seq_len {
                return Err(CliError::Config(format!(
                    "synthetic max_len {max_len} plus BOS/EOS exceeds max_seq_len {}",
                    self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// Loads or builds both vocabularies and checks them against the model.
    pub fn vocabularies(&self) -> Result<(Vocab, Vocab), CliError> {
        let (src, tgt) = match &self.data {
            DataConfig::Parallel {
                src_vocab, tgt_vocab, ..
            } => (Vocab::read(src_vocab)?, Vocab::read(tgt_vocab)?),
            DataConfig::Synthetic { vocab_size, .. } => {
                (Vocab::synthetic(*vocab_size)?, Vocab::synthetic(*vocab_size)?)
            }
        };
        check_vocab_sizes(&self.model, &src, &tgt)?;
        Ok((src, tgt))
    }
}

pub(crate) fn check_vocab_sizes(model: &ModelConfig, src: &Vocab, tgt: &Vocab) -> Result<(), CliError> {
    if src.len() != model.src_vocab_size || tgt.len() != model.tgt_vocab_size {
        return Err(CliError::Config(format!(
            "vocabulary sizes {}/{} do not match the model's {}/{}",
            src.len(),
            tgt.len(),
            model.src_vocab_size,
            model.tgt_vocab_size
        )));
    }
    Ok(())
}
