//! Command implementations behind the `gatedformer` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gatedformer::data::{detokenize, encode_pairs, read_lines, read_parallel, synth_copy_task, tokenize, TokenPair};
use gatedformer::metrics::{corpus_bleu, BleuReport};
use gatedformer::model::{load_checkpoint, ParamBreakdown};
use gatedformer::optim::{rng_stream, SYNTH_STREAM};
use gatedformer::train::{RunPaths, Trainer};
use gatedformer::verify::{gradcheck_component, Component, GradCheckReport};
use gatedformer::{ModelConfig, ReferenceSize, TransformerModel, Variant, Vocab};
use serde::Serialize;

mod config;

pub use config::{
    DataConfig, OutputConfig, RunConfig, EFFECTIVE_CONFIG_FILE, RUN_DIR_ENV, SRC_VOCAB_FILE, TGT_VOCAB_FILE,
};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Core(#[from] gatedformer::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for a failed check or a diverged run, 2 for usage and configuration
    /// problems, 3 for unreadable, unwritable or corrupt files.
    pub fn exit_code(&self) -> i32 {
        use gatedformer::Error as E;
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Checkpoint(_) | E::InvalidUtf8(_) | E::VocabFormat { .. } => 3,
                E::Diverged { .. } | E::NonFinite { .. } | E::NonFiniteGradient { .. } => 1,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gatedformer",
    version,
    about = "Train and evaluate gated encoder-decoder transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build source and target vocabularies from a parallel corpus.
    BuildVocab {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long, default_value_t = gatedformer::data::DEFAULT_MIN_FREQ)]
        min_freq: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model from a JSON run configuration.
    Train {
        config: PathBuf,
        /// Continue from the state file in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Greedy-decode every line of a file.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Defaults to `src.vocab` next to the checkpoint.
        #[arg(long)]
        src_vocab: Option<PathBuf>,
        /// Defaults to `tgt.vocab` next to the checkpoint.
        #[arg(long)]
        tgt_vocab: Option<PathBuf>,
        /// Defaults to the model's maximum sequence length.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corpus BLEU of a hypothesis file, or of a checkpoint's translations.
    Evaluate {
        #[arg(long, conflicts_with_all = ["checkpoint", "src"])]
        hyp: Option<PathBuf>,
        #[arg(long, requires = "src")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        src: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Count learnable parameters.
    Params {
        /// A run configuration or a bare model configuration.
        #[arg(long, required_unless_present = "reference")]
        config: Option<PathBuf>,
        /// All reference sizes and variants.
        #[arg(long, conflicts_with = "config")]
        reference: bool,
        #[arg(long)]
        json: bool,
    },
    /// Compare tape gradients with central differences.
    Gradcheck {
        /// eau, grc, mha, layer_norm, ffn, full_micro_model or all
        component: Component,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to 1e-5 for components and 1e-4 for the full micro model.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        json: bool,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::BuildVocab {
            src,
            tgt,
            min_freq,
            out_dir,
        } => cmd_build_vocab(&src, &tgt, min_freq, &out_dir, out),
        Command::Train { config, resume, quiet } => cmd_train(&config, resume, quiet, out).map(|_| ()),
        Command::Translate {
            checkpoint,
            input,
            output,
            src_vocab,
            tgt_vocab,
            max_len,
        } => {
            let vocab_dir = checkpoint.parent().unwrap_or(Path::new("."));
            let src_vocab = src_vocab.unwrap_or_else(|| vocab_dir.join(SRC_VOCAB_FILE));
            let tgt_vocab = tgt_vocab.unwrap_or_else(|| vocab_dir.join(TGT_VOCAB_FILE));
            let lines = cmd_translate(&checkpoint, &input, &src_vocab, &tgt_vocab, max_len)?;
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            match output {
                Some(path) => fs::write(&path, text).map_err(|e| CliError::io(&path, e)),
                None => write_out(out, &text),
            }
        }
        Command::Evaluate {
            hyp,
            checkpoint,
            src,
            reference,
            json,
        } => {
            let report = match (hyp, checkpoint, src) {
                (Some(hyp), None, None) => evaluate_files(&hyp, &reference)?,
                (None, Some(ckpt), Some(src)) => {
                    let dir = ckpt.parent().unwrap_or(Path::new("."));
                    let hyps = cmd_translate(&ckpt, &src, &dir.join(SRC_VOCAB_FILE), &dir.join(TGT_VOCAB_FILE), None)?;
                    evaluate_lines(&hyps, &read_lines(&reference)?)?
                }
                _ => {
                    return Err(CliError::Usage(
                        "evaluate needs either --hyp or both --checkpoint and --src".into(),
                    ))
                }
            };
            if json {
                write_out(out, &format!("{}\n", to_json(&report)?))
            } else {
                write_out(out, &format!("{report}\n"))
            }
        }
        Command::Params {
            config,
            reference,
            json,
        } => {
            let rows = match config {
                Some(path) if !reference => vec![cmd_params(&path)?],
                _ => reference_rows()?,
            };
            let text = if json {
                format!("{}\n", to_json(&rows)?)
            } else {
                rows.iter().map(ParamReport::to_text).collect::<Vec<_>>().join("\n")
            };
            write_out(out, &text)
        }
        Command::Gradcheck {
            component,
            seed,
            tolerance,
            json,
        } => {
            let reports = cmd_gradcheck(component, seed, tolerance)?;
            if json {
                write_out(out, &format!("{}\n", to_json(&reports)?))?;
            } else {
                for r in &reports {
                    write_out(out, &r.to_text())?;
                }
            }
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.component.name())
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::CheckFailed(format!(
                    "gradient check failed: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))
}

pub fn cmd_build_vocab(
    src: &Path,
    tgt: &Path,
    min_freq: usize,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    for (side, path, file) in [("src", src, SRC_VOCAB_FILE), ("tgt", tgt, TGT_VOCAB_FILE)] {
        let sentences: Vec<Vec<String>> = read_lines(path)?.iter().map(|l| tokenize(l)).collect();
        let vocab = Vocab::build(&sentences, min_freq)?;
        vocab.write(&out_dir.join(file))?;
        // out-of-vocabulary rate of the last tenth against a vocabulary of the rest
        let split = sentences.len() - sentences.len() / 10;
        let oov = Vocab::build(&sentences[..split], min_freq)?
            .oov_rate(&sentences[split..])
            .map_or_else(|| "n/a".to_string(), |r| format!("{:.2}%", 100.0 * r));
        write_out(
            out,
            &format!(
                "{side}: {} types (min_freq {min_freq}) from {} lines, held-out OOV {oov} -> {}\n",
                vocab.len(),
                sentences.len(),
                out_dir.join(file).display()
            ),
        )?;
    }
    Ok(())
}

/// Training and validation pairs exactly as `train` sees them.
pub fn load_pairs(cfg: &RunConfig) -> Result<(Vec<TokenPair>, Vec<TokenPair>), CliError> {
    Ok(match &cfg.data {
        DataConfig::Parallel {
            train_src,
            train_tgt,
            val_src,
            val_tgt,
            ..
        } => (read_parallel(train_src, train_tgt)?, read_parallel(val_src, val_tgt)?),
        DataConfig::Synthetic {
            vocab_size,
            train_pairs,
            val_pairs,
            min_len,
            max_len,
            mode,
        } => {
            let seed = cfg.model.seed;
            let range = *min_len..=*max_len;
            let mut rng = rng_stream(seed, SYNTH_STREAM, 0);
            let train = synth_copy_task(*vocab_size, *train_pairs, range.clone(), *mode, &mut rng)?;
            let mut rng = rng_stream(seed, SYNTH_STREAM, 1);
            let val = synth_copy_task(*vocab_size, *val_pairs, range, *mode, &mut rng)?;
            (train, val)
        }
    })
}

/// Outcome of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub dropped_pairs: usize,
    pub final_val_loss: f64,
    pub final_val_token_accuracy: f64,
    pub best_val_loss: Option<f64>,
}

pub fn cmd_train(config_path: &Path, resume: bool, quiet: bool, out: &mut dyn Write) -> Result<TrainSummary, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let dir = cfg.output.run_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let effective = to_json(&cfg)?;
    let effective_path = dir.join(EFFECTIVE_CONFIG_FILE);
    if resume {
        let previous: RunConfig = config::read_json(&effective_path)?;
        if previous.model != cfg.model || previous.data != cfg.data || previous.train.optimizer != cfg.train.optimizer {
            return Err(CliError::Config(format!(
                "{} differs from the configuration being resumed",
                effective_path.display()
            )));
        }
    }
    fs::write(&effective_path, format!("{effective}\n")).map_err(|e| CliError::io(&effective_path, e))?;

    let (src_vocab, tgt_vocab) = cfg.vocabularies()?;
    src_vocab.write(&dir.join(SRC_VOCAB_FILE))?;
    tgt_vocab.write(&dir.join(TGT_VOCAB_FILE))?;
    let (train, val) = load_pairs(&cfg)?;
    let model = TransformerModel::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(
        model,
        cfg.train.clone(),
        encode_pairs(&train, &src_vocab, &tgt_vocab),
        encode_pairs(&val, &src_vocab, &tgt_vocab),
    )?;
    let paths = RunPaths::in_dir(&dir);
    if resume {
        trainer.restore(Trainer::load_state(&paths.state)?)?;
    }
    if !quiet {
        write_out(
            out,
            &format!(
                "{} parameters, {} pairs dropped as too long, run directory {}\n",
                trainer.model().count_params(),
                trainer.dropped(),
                dir.display()
            ),
        )?;
    }
    trainer.run(&paths, |row| {
        if let (false, Some(v)) = (quiet, &row.val) {
            // progress output is best effort; a closed stdout must not abort training
            let _ = writeln!(
                out,
                "step {:>6}  lr {:.3e}  train_loss {:.4}  val_loss {:.4}  val_token_acc {:.4}",
                row.step, row.lr, row.train_loss, v.loss, v.token_accuracy
            );
        }
    })?;
    let final_eval = trainer.evaluate()?;
    Ok(TrainSummary {
        run_dir: dir,
        steps: trainer.step_count(),
        dropped_pairs: trainer.dropped(),
        final_val_loss: final_eval.loss,
        final_val_token_accuracy: final_eval.token_accuracy,
        best_val_loss: trainer.best_val_loss(),
    })
}

/// Greedy translations of every line of `input`, detokenized.
pub fn cmd_translate(
    checkpoint: &Path,
    input: &Path,
    src_vocab: &Path,
    tgt_vocab: &Path,
    max_len: Option<usize>,
) -> Result<Vec<String>, CliError> {
    let model = load_checkpoint(checkpoint)?;
    let src_vocab = Vocab::read(src_vocab)?;
    let tgt_vocab = Vocab::read(tgt_vocab)?;
    config::check_vocab_sizes(model.config(), &src_vocab, &tgt_vocab)?;
    let n = model.config().max_seq_len;
    let max_len = max_len.unwrap_or(n);
    read_lines(input)?
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let ids = src_vocab.encode(&tokenize(line), true);
            if ids.len() > n {
                return Err(CliError::Usage(format!(
                    "{}:{}: {} tokens exceed the model limit of {}",
                    input.display(),
                    i + 1,
                    ids.len() - 2,
                    n - 2
                )));
            }
            let out = model.greedy_decode(&ids, max_len)?;
            Ok(detokenize(&tgt_vocab.decode(&out)))
        })
        .collect()
}

pub fn evaluate_lines<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<BleuReport, CliError> {
    let tok = |lines: &[S]| -> Vec<Vec<String>> { lines.iter().map(|l| tokenize(l.as_ref())).collect() };
    Ok(corpus_bleu(&tok(hyps), &tok(refs))?)
}

pub fn evaluate_files(hyp: &Path, reference: &Path) -> Result<BleuReport, CliError> {
    evaluate_lines(&read_lines(hyp)?, &read_lines(reference)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub variant: &'static str,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub breakdown: ParamBreakdown,
}

impl ParamReport {
    pub fn for_config(cfg: ModelConfig) -> Result<Self, CliError> {
        let model = TransformerModel::new(cfg)?;
        let c = model.config();
        Ok(Self {
            variant: c.variant().name(),
            num_layers: c.num_layers,
            max_seq_len: c.max_seq_len,
            model_dim: c.model_dim,
            ffn_dim: c.ffn_dim,
            src_vocab_size: c.src_vocab_size,
            tgt_vocab_size: c.tgt_vocab_size,
            breakdown: model.param_breakdown(),
        })
    }

    pub fn total(&self) -> usize {
        self.breakdown.total
    }

    pub fn to_text(&self) -> String {
        let b = &self.breakdown;
        let mut s = format!(
            "{} l={} n={} k={} f={} V_src={} V_tgt={}\n",
            self.variant,
            self.num_layers,
            self.max_seq_len,
            self.model_dim,
            self.ffn_dim,
            self.src_vocab_size,
            self.tgt_vocab_size
        );
        for (name, v) in [
            ("src_embedding", b.src_embedding),
            ("tgt_embedding", b.tgt_embedding),
            ("encoder_layer", b.encoder_layer),
            ("decoder_layer", b.decoder_layer),
            ("generator", b.generator),
        ] {
            s.push_str(&format!("  {name:<16}{v:>12}\n"));
        }
        s.push_str(&format!(
            "  {:<16}{:>12}  ({} units)\n",
            "eau_total", b.eau_total, b.eau_units
        ));
        s.push_str(&format!(
            "  {:<16}{:>12}  ({} units)\n",
            "grc_total", b.grc_total, b.grc_units
        ));
        s.push_str(&format!("  {:<16}{:>12}\n", "total", b.total));
        s
    }
}

/// Accepts either a full run configuration or a bare model configuration.
pub fn cmd_params(path: &Path) -> Result<ParamReport, CliError> {
    let value: serde_json::Value = config::read_json(path)?;
    let model = if value.get("model").is_some() {
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.model
    } else {
        serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    ParamReport::for_config(model)
}

/// Every reference size with the baseline, EAU-only and combined variants.
pub fn reference_rows() -> Result<Vec<ParamReport>, CliError> {
    let mut rows = Vec::new();
    for size in ReferenceSize::ALL {
        for v in [Variant::Baseline, Variant::Eau, Variant::EauGrc] {
            rows.push(ParamReport::for_config(ModelConfig::reference(size, v))?);
        }
    }
    Ok(rows)
}

pub fn cmd_gradcheck(
    component: Component,
    seed: u64,
    tolerance: Option<f64>,
) -> Result<Vec<GradCheckReport>, CliError> {
    component
        .expand()
        .into_iter()
        .map(|c| {
            Ok(gradcheck_component(
                c,
                seed,
                tolerance.unwrap_or(c.default_tolerance()),
            )?)
        })
        .collect()
}
