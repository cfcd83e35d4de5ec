//! Tokenization, vocabularies and batching for parallel corpora.

use std::collections::HashMap;
use std::fs;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];
pub const DEFAULT_MIN_FREQ: usize = 2;

/// A source/target pair of token lists.
pub type TokenPair = (Vec<String>, Vec<String>);

const EXTRA_PUNCTUATION: &[char] = &['¡', '¿', '«', '»', '„', '“', '”', '‘', '’', '‚', '…', '–', '—', '·'];

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || EXTRA_PUNCTUATION.contains(&c)
}

/// Lowercases, isolates punctuation characters as tokens of their own and
/// splits on whitespace.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in line.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || is_punctuation(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

pub fn tokenize_bytes(line: &[u8]) -> Result<Vec<String>> {
    Ok(tokenize(std::str::from_utf8(line)?))
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" ")
}

/// Reads a UTF-8 file as a list of lines without their terminators.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = std::str::from_utf8(&bytes)?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads two line-aligned files and tokenizes every line.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<TokenPair>> {
    let s = read_lines(src)?;
    let t = read_lines(tgt)?;
    if s.len() != t.len() {
        return Err(Error::LengthMismatch {
            what: "parallel corpus lines",
            left: s.len(),
            right: t.len(),
        });
    }
    Ok(s.iter().zip(&t).map(|(a, b)| (tokenize(a), tokenize(b))).collect())
}

/// Token ↔ id mapping. Ids 0–3 are always PAD, UNK, BOS and EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
    min_freq: usize,
}

impl Vocab {
    fn from_entries(entries: Vec<(String, u64)>, min_freq: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIAL_TOKENS.len()];
        for (t, c) in entries {
            tokens.push(t);
            counts.push(c);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::VocabFormat {
                    line: i + 1,
                    reason: format!("duplicate token `{t}`"),
                });
            }
        }
        Ok(Self {
            tokens,
            counts,
            index,
            min_freq,
        })
    }

    /// Builds a vocabulary from tokenized sentences. Tokens seen at least
    /// `min_freq` times are kept, most frequent first, ties broken
    /// lexicographically.
    pub fn build<I, S>(sentences: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[String]>,
    {
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let sentences: Vec<S> = sentences.into_iter().collect();
        for s in &sentences {
            for t in s.as_ref() {
                if !SPECIAL_TOKENS.contains(&t.as_str()) {
                    *freq.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut entries: Vec<(String, u64)> = freq
            .into_iter()
            .filter(|&(_, c)| c >= min_freq as u64)
            .map(|(t, c)| (t.to_string(), c))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_entries(entries, min_freq)
    }

    /// Tokenizes raw lines and builds from them.
    pub fn build_from_lines<S: AsRef<str>>(lines: &[S], min_freq: usize) -> Result<Self> {
        Self::build(lines.iter().map(|l| tokenize(l.as_ref())), min_freq)
    }

    /// The four specials followed by symbols `s0`, `s1`, …, `size` ids in total.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 5 {
            return Err(Error::Config(format!(
                "synthetic vocabulary needs at least 5 ids, got {size}"
            )));
        }
        let entries = (0..size - SPECIAL_TOKENS.len()).map(|i| (format!("s{i}"), 1)).collect();
        Self::from_entries(entries, 1)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: u32) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], add_bos_eos: bool) -> Vec<u32> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_bos_eos {
            ids.push(BOS_ID);
        }
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        if add_bos_eos {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Maps ids back to tokens, stopping at the first EOS and skipping PAD
    /// and BOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS_ID)
            .filter(|&&i| i != PAD_ID && i != BOS_ID)
            .map(|&i| self.token(i).unwrap_or(SPECIAL_TOKENS[UNK_ID as usize]).to_string())
            .collect()
    }

    /// Fraction of tokens in `sentences` that map to UNK.
    pub fn oov_rate<S: AsRef<[String]>>(&self, sentences: &[S]) -> Option<f64> {
        let (mut total, mut unknown) = (0usize, 0usize);
        for s in sentences {
            for t in s.as_ref() {
                total += 1;
                unknown += !self.contains(t) as usize;
            }
        }
        (total > 0).then(|| unknown as f64 / total as f64)
    }

    /// `token<TAB>count` per line, specials first.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            out.push_str(t);
            out.push('\t');
            out.push_str(&c.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut min_count = u64::MAX;
        for (i, line) in text.lines().enumerate() {
            let bad = |reason: String| Error::VocabFormat { line: i + 1, reason };
            let (token, count) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `token<TAB>count`".into()))?;
            let count: u64 = count.parse().map_err(|_| bad(format!("invalid count `{count}`")))?;
            if token.is_empty() {
                return Err(bad("empty token".into()));
            }
            if i < SPECIAL_TOKENS.len() {
                if token != SPECIAL_TOKENS[i] {
                    return Err(bad(format!("expected special `{}`", SPECIAL_TOKENS[i])));
                }
            } else {
                min_count = min_count.min(count);
                entries.push((token.to_string(), count));
            }
        }
        let specials = text.lines().count().min(SPECIAL_TOKENS.len());
        if specials < SPECIAL_TOKENS.len() {
            return Err(Error::VocabFormat {
                line: specials + 1,
                reason: "missing special tokens".into(),
            });
        }
        let min_freq = if entries.is_empty() {
            1
        } else {
            min_count.max(1) as usize
        };
        Self::from_entries(entries, min_freq)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(std::str::from_utf8(&bytes)?)
    }
}

/// A sentence pair as raw ids, without BOS/EOS markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

pub fn encode_pairs(pairs: &[TokenPair], src_vocab: &Vocab, tgt_vocab: &Vocab) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|(s, t)| EncodedPair {
            src: src_vocab.encode(s, false),
            tgt: tgt_vocab.encode(t, false),
        })
        .collect()
}

/// A padded minibatch.
///
/// `src` rows are `BOS x… EOS`, `tgt_in` rows are `BOS y…` and `tgt_out` rows
/// are `y… EOS`. Pad masks are `true` exactly where the id is PAD;
/// `causal_mask[i][j]` is `true` when position `i` may attend to `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt_in: Vec<Vec<u32>>,
    pub tgt_out: Vec<Vec<u32>>,
    pub src_pad_mask: Vec<Vec<bool>>,
    pub tgt_pad_mask: Vec<Vec<bool>>,
    pub causal_mask: Vec<Vec<bool>>,
}

pub fn causal_mask(seq: usize) -> Vec<Vec<bool>> {
    (0..seq).map(|i| (0..seq).map(|j| j <= i).collect()).collect()
}

fn pad_rows(rows: Vec<Vec<u32>>) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|j| j >= r.len()).collect())
        .collect();
    let rows = rows
        .into_iter()
        .map(|mut r| {
            r.resize(width, PAD_ID);
            r
        })
        .collect();
    (rows, masks)
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Self {
        let src = pairs
            .iter()
            .map(|p| {
                let mut r = Vec::with_capacity(p.src.len() + 2);
                r.push(BOS_ID);
                r.extend_from_slice(&p.src);
                r.push(EOS_ID);
                r
            })
            .collect();
        let tgt_in = pairs
            .iter()
            .map(|p| std::iter::once(BOS_ID).chain(p.tgt.iter().copied()).collect())
            .collect();
        let tgt_out = pairs
            .iter()
            .map(|p| p.tgt.iter().copied().chain(std::iter::once(EOS_ID)).collect())
            .collect();
        let (src, src_pad_mask) = pad_rows(src);
        let (tgt_in, tgt_pad_mask) = pad_rows(tgt_in);
        let (tgt_out, _) = pad_rows(tgt_out);
        let batch = Self {
            causal_mask: causal_mask(tgt_in[0].len()),
            src,
            tgt_in,
            tgt_out,
            src_pad_mask,
            tgt_pad_mask,
        };
        batch.assert_invariants();
        batch
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Non-pad target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().flatten().filter(|&&t| t != PAD_ID).count()
    }

    fn assert_invariants(&self) {
        for (ids, mask) in [(&self.src, &self.src_pad_mask), (&self.tgt_in, &self.tgt_pad_mask)] {
            for (r, m) in ids.iter().zip(mask.iter()) {
                assert!(r.iter().zip(m).all(|(&id, &p)| (id == PAD_ID) == p));
                assert!(m.iter().any(|&p| !p), "batch row without real tokens");
            }
        }
        for (i, o) in self.tgt_in.iter().zip(&self.tgt_out) {
            assert_eq!(i[0], BOS_ID);
            let real = o.iter().take_while(|&&t| t != PAD_ID).count();
            assert_eq!(o[real - 1], EOS_ID);
            assert_eq!(&i[1..real], &o[..real - 1]);
        }
        assert_eq!(self.causal_mask.len(), self.tgt_in[0].len());
    }
}

/// Batches ready for one pass over the data.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub dropped: usize,
}

/// Drops pairs with either side longer than `max_len - 2` tokens, shuffles the
/// rest with `rng` and groups them into batches padded to their longest
/// member.
pub fn batch_encoded(
    pairs: &[EncodedPair],
    batch_size: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let limit = max_len.saturating_sub(2);
    let mut kept: Vec<&EncodedPair> = pairs
        .iter()
        .filter(|p| p.src.len() <= limit && p.tgt.len() <= limit)
        .collect();
    let dropped = pairs.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::NoSurvivingPairs { dropped });
    }
    kept.shuffle(rng);
    let batches = kept.chunks(batch_size).map(Batch::from_pairs).collect();
    Ok(BatchPlan { batches, dropped })
}

/// Encodes token pairs and batches them, see [`batch_encoded`].
pub fn make_batches(
    pairs: &[TokenPair],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    batch_size: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<BatchPlan> {
    batch_encoded(&encode_pairs(pairs, src_vocab, tgt_vocab), batch_size, max_len, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    Copy,
    Reverse,
}

/// Random symbol strings over the non-special ids of a vocabulary of
/// `vocab_size`, with the target equal to the source or its reversal.
pub fn synth_copy_task(
    vocab_size: usize,
    num_pairs: usize,
    len_range: RangeInclusive<usize>,
    mode: SynthMode,
    rng: &mut impl Rng,
) -> Result<Vec<TokenPair>> {
    let vocab = Vocab::synthetic(vocab_size)?;
    if len_range.is_empty() {
        return Err(Error::Config(format!("empty length range {len_range:?}")));
    }
    let first = SPECIAL_TOKENS.len() as u32;
    let pairs = (0..num_pairs)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            let src: Vec<String> = (0..len)
                .map(|_| {
                    vocab
                        .token(rng.gen_range(first..vocab_size as u32))
                        .unwrap()
                        .to_string()
                })
                .collect();
            let mut tgt = src.clone();
            if mode == SynthMode::Reverse {
                tgt.reverse();
            }
            (src, tgt)
        })
        .collect();
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{rng_stream, SHUFFLE_STREAM, SYNTH_STREAM};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("Two dogs play."), toks("two dogs play ."));
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("A  b"), toks("a b"));
        assert_eq!(tokenize("„Straße“, sagte er!"), toks("„ straße “ , sagte er !"));
        assert!(tokenize_bytes(&[0x66, 0xff]).is_err());
    }

    #[test]
    fn vocab_ordering_and_min_freq() {
        let v = Vocab::build_from_lines(&["a a b"], 1).unwrap();
        assert_eq!(v.tokens()[4..], ["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        let v2 = Vocab::build_from_lines(&["a a b"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), UNK_ID);
        assert_eq!(Vocab::build_from_lines(&["a a b"], 1).unwrap(), v);
        let empty = Vocab::build_from_lines::<&str>(&[], 2).unwrap();
        assert_eq!(empty.len(), 4);
        assert!(Vocab::build_from_lines(&["a"], 0).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build_from_lines(&["c b a c"], 1).unwrap();
        assert_eq!(v.tokens()[4..], toks("c a b"));
    }

    #[test]
    fn encoding_examples() {
        let v = Vocab::build_from_lines(&["a a b"], 1).unwrap();
        assert_eq!(v.encode(&toks("a c"), true), vec![2, 4, 1, 3]);
        assert_eq!(v.encode::<&str>(&[], true), vec![2, 3]);
        let known = toks("b a a");
        assert_eq!(v.decode(&v.encode(&known, true)), known);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build_from_lines(&["the cat sat on the mat ."], 1).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with("<pad>\t0\n<unk>\t0\n<bos>\t0\n<eos>\t0\nthe\t2\n"));
        assert_eq!(Vocab::parse(&text).unwrap().tokens(), v.tokens());
        assert!(matches!(
            Vocab::parse("<pad>\t0\n<bos>\t0\n"),
            Err(Error::VocabFormat { line: 2, .. })
        ));
        assert!(Vocab::parse("<pad>\t0\n<unk>\t0\n<bos>\t0\n<eos>\t0\nx\t1\nx\t1\n").is_err());
    }

    fn pair(s: usize, t: usize) -> EncodedPair {
        EncodedPair {
            src: vec![7; s],
            tgt: vec![8; t],
        }
    }

    #[test]
    fn padding_and_masks() {
        let pairs = [pair(3, 3), pair(5, 5)];
        let refs: Vec<&EncodedPair> = pairs.iter().collect();
        let b = Batch::from_pairs(&refs);
        assert_eq!(b.src[0].len(), 7);
        assert_eq!(b.src_pad_mask[0], [false, false, false, false, false, true, true]);
        assert_eq!(b.src_pad_mask[1], [false; 7]);
        assert_eq!(b.tgt_in[0], [2, 8, 8, 8, 0, 0]);
        assert_eq!(b.tgt_out[0], [8, 8, 8, 3, 0, 0]);
        assert_eq!(
            causal_mask(3),
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
    }

    #[test]
    fn batching_drops_long_pairs_and_conserves_tokens() {
        let pairs: Vec<EncodedPair> = (1..=10).map(|n| pair(n, 11 - n)).collect();
        let mut rng = rng_stream(1, SHUFFLE_STREAM, 0);
        let plan = batch_encoded(&pairs, 3, 9, &mut rng).unwrap();
        // kept: both sides ≤ 7, i.e. n in 4..=7
        assert_eq!(plan.dropped, 6);
        let tokens: usize = plan.batches.iter().map(Batch::target_tokens).sum();
        assert_eq!(tokens, (4..=7).map(|n| 11 - n + 1).sum::<usize>());
        assert!(matches!(
            batch_encoded(&pairs, 3, 2, &mut rng),
            Err(Error::NoSurvivingPairs { dropped: 10 })
        ));
    }

    #[test]
    fn shuffle_is_seeded() {
        let pairs: Vec<EncodedPair> = (1..=20).map(|n| pair(n % 5 + 1, n % 3 + 1)).collect();
        let run = |epoch| {
            batch_encoded(&pairs, 4, 10, &mut rng_stream(9, SHUFFLE_STREAM, epoch))
                .unwrap()
                .batches
        };
        assert_eq!(run(0), run(0));
        assert_ne!(run(0), run(1));
    }

    #[test]
    fn synthetic_tasks() {
        let mut rng = rng_stream(5, SYNTH_STREAM, 0);
        let copy = synth_copy_task(20, 50, 3..=8, SynthMode::Copy, &mut rng).unwrap();
        assert!(copy.iter().all(|(s, t)| s == t && (3..=8).contains(&s.len())));
        let rev = synth_copy_task(20, 50, 3..=8, SynthMode::Reverse, &mut rng).unwrap();
        assert!(rev.iter().all(|(s, t)| s.iter().rev().eq(t.iter())));
        let again = synth_copy_task(20, 50, 3..=8, SynthMode::Copy, &mut rng_stream(5, SYNTH_STREAM, 0)).unwrap();
        assert_eq!(again, copy);
        let vocab = Vocab::synthetic(20).unwrap();
        assert!(encode_pairs(&copy, &vocab, &vocab)
            .iter()
            .all(|p| p.src.iter().all(|&i| (4..20).contains(&i))));
        assert!(synth_copy_task(4, 1, 1..=2, SynthMode::Copy, &mut rng).is_err());
    }
}
