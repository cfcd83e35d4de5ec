//! Training loop, validation and resumable state.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_encoded, Batch, EncodedPair, EOS_ID};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::metrics::token_matches;
use crate::model::{save_checkpoint, TransformerModel};
use crate::optim::{rng_stream, AdamW, AdamWConfig, LrSchedule, Moments, DROPOUT_STREAM, SHUFFLE_STREAM};
use crate::tape::Tape;
use crate::tensor::{Parameterized, Tensor};

pub const LOG_HEADER: &str = "step,lr,train_loss,val_loss,val_token_acc";
const VAL_ORDER_COUNTER: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "batch_size, max_steps and eval_every must be positive".into(),
            ));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }
}

/// One line of the loss log. Validation columns are empty between
/// evaluations.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Evaluation>,
}

impl std::fmt::Display for LogRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},", self.step, self.lr, self.train_loss)?;
        match &self.val {
            Some(v) => write!(f, "{},{}", v.loss, v.token_accuracy),
            None => write!(f, ","),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub token_accuracy: f64,
}

/// Token-weighted loss and accuracy over `batches` with dropout off.
pub fn evaluate(model: &TransformerModel, batches: &[Batch]) -> Result<Evaluation> {
    let v = model.config().tgt_vocab_size;
    let (mut loss_sum, mut correct, mut counted) = (0.0, 0, 0);
    for b in batches {
        let mut tape = Tape::new();
        let (loss, logits) = model.batch_loss(&mut tape, b, &mut ForwardCtx::eval())?;
        let n = b.target_tokens();
        loss_sum += tape.value(loss).data()[0] * n as f64;
        let logits = tape.value(logits).clone().reshape([b.len() * b.tgt_out[0].len(), v])?;
        let targets: Vec<u32> = b.tgt_out.iter().flatten().copied().collect();
        let (c, t) = token_matches(&logits, &targets, crate::data::PAD_ID)?;
        correct += c;
        counted += t;
    }
    if counted == 0 {
        return Err(Error::AllPadding);
    }
    Ok(Evaluation {
        loss: loss_sum / counted as f64,
        token_accuracy: correct as f64 / counted as f64,
    })
}

/// Fraction of pairs whose greedy decoding, with EOS removed, equals the
/// target exactly.
pub fn greedy_exact_match(model: &TransformerModel, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = model.config().max_seq_len;
    let mut hits = 0;
    for p in pairs {
        let src: Vec<u32> = std::iter::once(crate::data::BOS_ID)
            .chain(p.src.iter().copied())
            .chain(std::iter::once(EOS_ID))
            .collect();
        let mut out = model.greedy_decode(&src, n)?;
        if out.last() == Some(&EOS_ID) {
            out.pop();
        }
        hits += (out == p.tgt) as usize;
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Where a run writes its outputs.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub log: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub state: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            log: dir.join("loss.csv"),
            best_checkpoint: dir.join("best.ckpt"),
            final_checkpoint: dir.join("final.ckpt"),
            state: dir.join("state.json"),
        }
    }
}

/// Exact training position, with full-precision parameters and moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub best_val_loss: Option<f64>,
    pub params: BTreeMap<String, Vec<f64>>,
    pub first_moments: BTreeMap<String, Vec<f64>>,
    pub second_moments: BTreeMap<String, Vec<f64>>,
}

pub struct Trainer {
    model: TransformerModel,
    optimizer: AdamW,
    config: TrainConfig,
    train: Vec<EncodedPair>,
    val_batches: Vec<Batch>,
    batches: Vec<Batch>,
    dropped: usize,
    epoch: u64,
    cursor: usize,
    best_val_loss: Option<f64>,
}

impl Trainer {
    /// Pairs longer than the model's `max_seq_len - 2` are dropped from both
    /// splits; see [`Trainer::dropped`].
    pub fn new(
        model: TransformerModel,
        config: TrainConfig,
        train: Vec<EncodedPair>,
        val: Vec<EncodedPair>,
    ) -> Result<Self> {
        config.validate()?;
        let seed = model.config().seed;
        let n = model.config().max_seq_len;
        let val_plan = batch_encoded(
            &val,
            config.batch_size,
            n,
            &mut rng_stream(seed, SHUFFLE_STREAM, VAL_ORDER_COUNTER),
        )?;
        let plan = batch_encoded(&train, config.batch_size, n, &mut rng_stream(seed, SHUFFLE_STREAM, 0))?;
        Ok(Self {
            optimizer: AdamW::new(config.optimizer.clone())?,
            model,
            config,
            train,
            val_batches: val_plan.batches,
            batches: plan.batches,
            dropped: plan.dropped + val_plan.dropped,
            epoch: 0,
            cursor: 0,
            best_val_loss: None,
        })
    }

    pub fn model(&self) -> &TransformerModel {
        &self.model
    }

    pub fn into_model(self) -> TransformerModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn is_done(&self) -> bool {
        self.step_count() >= self.config.max_steps
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_val_loss
    }

    pub fn evaluate(&self) -> Result<Evaluation> {
        evaluate(&self.model, &self.val_batches)
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.cursor == self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            let mut rng = rng_stream(self.model.config().seed, SHUFFLE_STREAM, self.epoch);
            self.batches = batch_encoded(
                &self.train,
                self.config.batch_size,
                self.model.config().max_seq_len,
                &mut rng,
            )?
            .batches;
        }
        self.cursor += 1;
        Ok(self.batches[self.cursor - 1].clone())
    }

    /// One optimizer update, followed by validation on evaluation steps.
    /// Returns the log row and whether validation loss improved.
    pub fn step(&mut self) -> Result<(LogRow, bool)> {
        let step = self.step_count() + 1;
        let batch = self.next_batch()?;
        let cfg = self.model.config();
        let mut ctx = ForwardCtx::train(cfg.dropout, rng_stream(cfg.seed, DROPOUT_STREAM, step));
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                step,
                reason: format!("{op} produced a non-finite value"),
            },
            Error::NonFiniteGradient { name } => Error::Diverged {
                step,
                reason: format!("non-finite gradient for `{name}`"),
            },
            other => other,
        };
        let mut tape = Tape::new();
        let (loss, _) = self.model.batch_loss(&mut tape, &batch, &mut ctx).map_err(diverged)?;
        let train_loss = tape.value(loss).data()[0];
        let grads = tape.backward(loss).map_err(diverged)?;
        let lr = self.config.schedule.lr_at(step);
        self.optimizer
            .step(self.model.named_params_mut(), &grads, lr)
            .map_err(diverged)?;

        let mut improved = false;
        let val = if step.is_multiple_of(self.config.eval_every) || step == self.config.max_steps {
            let e = self.evaluate()?;
            if self.best_val_loss.is_none_or(|b| e.loss < b) {
                self.best_val_loss = Some(e.loss);
                improved = true;
            }
            Some(e)
        } else {
            None
        };
        Ok((
            LogRow {
                step,
                lr,
                train_loss,
                val,
            },
            improved,
        ))
    }

    pub fn state(&self) -> TrainState {
        let params = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value.data().to_vec()))
            .collect();
        let moments = self.optimizer.moments();
        TrainState {
            step: self.step_count(),
            epoch: self.epoch,
            cursor: self.cursor,
            best_val_loss: self.best_val_loss,
            params,
            first_moments: moments.iter().map(|(n, m)| (n.clone(), m.m.data().to_vec())).collect(),
            second_moments: moments.iter().map(|(n, m)| (n.clone(), m.v.data().to_vec())).collect(),
        }
    }

    /// Continues from `state`, which must come from a model with the same
    /// architecture.
    pub fn restore(&mut self, state: TrainState) -> Result<()> {
        let mismatch = |m: String| Error::StateMismatch(m);
        let mut moments = BTreeMap::new();
        for (name, p) in self.model.named_params_mut() {
            let shape = p.value.shape().to_vec();
            let take = |map: &BTreeMap<String, Vec<f64>>, what: &str| -> Result<Option<Tensor>> {
                match map.get(&name) {
                    None => Ok(None),
                    Some(v) => Tensor::new(shape.clone(), v.clone())
                        .map(Some)
                        .map_err(|e| mismatch(format!("{what} `{name}`: {e}"))),
                }
            };
            let value =
                take(&state.params, "parameter")?.ok_or_else(|| mismatch(format!("missing parameter `{name}`")))?;
            if let (Some(m), Some(v)) = (
                take(&state.first_moments, "moment")?,
                take(&state.second_moments, "moment")?,
            ) {
                moments.insert(name.clone(), Moments { m, v });
            }
            p.value = value;
        }
        if state.params.len() != self.model.named_params().len() {
            return Err(mismatch("parameter sets differ".into()));
        }
        let mut rng = rng_stream(self.model.config().seed, SHUFFLE_STREAM, state.epoch);
        self.batches = batch_encoded(
            &self.train,
            self.config.batch_size,
            self.model.config().max_seq_len,
            &mut rng,
        )?
        .batches;
        if state.cursor > self.batches.len() {
            return Err(mismatch(format!("batch cursor {} beyond epoch", state.cursor)));
        }
        self.epoch = state.epoch;
        self.cursor = state.cursor;
        self.best_val_loss = state.best_val_loss;
        self.optimizer.restore(state.step, moments);
        Ok(())
    }

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.state())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_state(path: &Path) -> Result<TrainState> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Trains until `max_steps`, appending to the loss log and keeping the
    /// best-validation and final checkpoints plus a resumable state file.
    /// `on_row` sees every log row as it is written.
    pub fn run(&mut self, paths: &RunPaths, mut on_row: impl FnMut(&LogRow)) -> Result<()> {
        let fresh = self.step_count() == 0;
        let mut log = OpenOptions::new()
            .create(true)
            .write(true)
            .append(!fresh)
            .truncate(fresh)
            .open(&paths.log)
            .map_err(|e| Error::io(&paths.log, e))?;
        if fresh {
            writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&paths.log, e))?;
        }
        while !self.is_done() {
            let (row, improved) = self.step()?;
            writeln!(log, "{row}").map_err(|e| Error::io(&paths.log, e))?;
            on_row(&row);
            if improved {
                save_checkpoint(&self.model, &paths.best_checkpoint)?;
            }
            if row.val.is_some() {
                log.flush().map_err(|e| Error::io(&paths.log, e))?;
                self.save_state(&paths.state)?;
            }
        }
        log.flush().map_err(|e| Error::io(&paths.log, e))?;
        save_checkpoint(&self.model, &paths.final_checkpoint)?;
        self.save_state(&paths.state)
    }
}
