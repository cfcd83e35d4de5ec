//! Corpus BLEU and token accuracy.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::argmax;
use crate::tensor::Tensor;

pub const BLEU_MAX_ORDER: usize = 4;

/// Corpus-level BLEU-4, single reference, no smoothing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; BLEU_MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl std::fmt::Display for BleuReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        write!(
            f,
            "BLEU = {:.3}, {} (BP = {:.3}, ratio = {:.3}, hyp_len = {}, ref_len = {})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            self.candidate_len as f64 / self.reference_len.max(1) as f64,
            self.candidate_len,
            self.reference_len
        )
    }
}

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

pub fn corpus_bleu<T: Hash + Eq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::LengthMismatch {
            what: "candidates vs references",
            left: candidates.len(),
            right: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut matched = [0usize; BLEU_MAX_ORDER];
    let mut total = [0usize; BLEU_MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=BLEU_MAX_ORDER {
            let ref_counts = ngram_counts(refr, n);
            for (g, count) in ngram_counts(cand, n) {
                matched[n - 1] += count.min(ref_counts.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; BLEU_MAX_ORDER];
    for n in 0..BLEU_MAX_ORDER {
        if total[n] > 0 {
            precisions[n] = matched[n] as f64 / total[n] as f64;
        }
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_ORDER as f64;
        100.0 * brevity_penalty * mean_log.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
    })
}

/// Fraction of non-pad rows of `logits` (`[N × V]`) whose arg-max equals the
/// target.
pub fn token_accuracy(logits: &Tensor, targets: &[u32], pad_id: u32) -> Result<f64> {
    let (correct, total) = token_matches(logits, targets, pad_id)?;
    if total == 0 {
        return Err(Error::AllPadding);
    }
    Ok(correct as f64 / total as f64)
}

/// `(correct, counted)` positions for [`token_accuracy`], for accumulation
/// across batches.
pub fn token_matches(logits: &Tensor, targets: &[u32], pad_id: u32) -> Result<(usize, usize)> {
    let v = logits.last_dim();
    let rows = logits.numel() / v.max(1);
    if rows != targets.len() {
        return Err(Error::LengthMismatch {
            what: "logit rows vs targets",
            left: rows,
            right: targets.len(),
        });
    }
    let mut correct = 0;
    let mut total = 0;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t == pad_id {
            continue;
        }
        total += 1;
        correct += (argmax(row) == t as usize) as usize;
    }
    Ok((correct, total))
}
