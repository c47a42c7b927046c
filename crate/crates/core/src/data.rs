//! Tokenisation, vocabulary, MLM corruption and batch assembly.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RESERVED_TOKENS;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;

const RESERVED_NAMES: [&str; RESERVED_TOKENS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("sequence has no maskable tokens")]
    NoMaskableTokens,
    #[error("sequence length {0} is too small (need at least 3 for CLS, token, SEP)")]
    SeqLenTooSmall(usize),
    #[error("no sequences to batch")]
    NoSequences,
    #[error("vocabulary size cap {0} leaves no room beyond the reserved tokens")]
    VocabCap(usize),
    #[error("malformed vocabulary file at line {line}: {message}")]
    VocabFile { line: usize, message: String },
}

/// Whitespace split, with every ASCII punctuation character as its own token.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if c.is_ascii_punctuation() {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

/// Token ↔ id bijection. Ids `0..5` are the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn from_tokens(corpus_tokens: Vec<String>) -> Self {
        let tokens: Vec<String> = RESERVED_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(corpus_tokens)
            .collect();
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).into_iter().map(|t| self.id(t)).collect()
    }

    /// Non-reserved tokens, in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED_TOKENS..]
    }

    /// One token per line; line `n` holds id `n + 5`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.corpus_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_str(text: &str) -> Result<Self, DataError> {
        let mut seen = HashMap::new();
        let mut tokens = Vec::new();
        for (line, t) in text.lines().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(DataError::VocabFile {
                    line: line + 1,
                    message: "token must be non-empty without whitespace".into(),
                });
            }
            if RESERVED_NAMES.contains(&t) || seen.insert(t.to_string(), line).is_some() {
                return Err(DataError::VocabFile {
                    line: line + 1,
                    message: format!("duplicate token {t:?}"),
                });
            }
            tokens.push(t.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Frequency-ranked vocabulary (ties broken lexicographically), capped at
/// `cap` entries including the reserved specials. Overflow maps to UNK.
pub fn build_vocab(corpus: &str, cap: usize) -> Result<Vocab, DataError> {
    if cap <= RESERVED_TOKENS {
        return Err(DataError::VocabCap(cap));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in tokenize(corpus) {
        *counts.entry(t).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !RESERVED_NAMES.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(cap - RESERVED_TOKENS);
    Ok(Vocab::from_tokens(
        ranked.into_iter().map(|(t, _)| t.to_string()).collect(),
    ))
}

/// Splits each non-empty line (document) into id windows of at most `window`.
pub fn documents_to_sequences(corpus: &str, vocab: &Vocab, window: usize) -> Vec<Vec<u32>> {
    let window = window.max(1);
    corpus
        .lines()
        .map(|l| vocab.encode(l))
        .filter(|ids| !ids.is_empty())
        .flat_map(|ids| ids.chunks(window).map(<[u32]>::to_vec).collect::<Vec<_>>())
        .collect()
}

// ---------------------------------------------------------------------------
// Corruption

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    /// Target fraction of maskable tokens selected for prediction.
    pub mask_rate: f64,
    /// Longest contiguous span.
    pub span_max: usize,
    /// Share of selected tokens replaced by MASK.
    pub mask_prob: f64,
    /// Share of selected tokens replaced by a random token.
    pub random_prob: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            mask_rate: 0.15,
            span_max: 3,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// What happened to a selected token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corrupted {
    pub tokens: Vec<u32>,
    /// Selected indices, ascending. Every one is a prediction target.
    pub positions: Vec<usize>,
    pub branches: Vec<Branch>,
}

pub fn is_special(id: u32) -> bool {
    matches!(id, PAD | CLS | SEP)
}

/// Span-masking corruption.
///
/// Spans of length uniform in `1..=span_max` are placed at random maskable
/// positions, never touching an existing selection, until the selected count
/// reaches the target (`mask_rate` of the maskable tokens, stochastically
/// rounded, at least 1). The last span is truncated to hit the target. A
/// `mask_rate` of 1 or more selects every maskable token.
pub fn corrupt<R: Rng>(
    x: &[u32],
    vocab_size: usize,
    rng: &mut R,
    cfg: &CorruptionConfig,
) -> Result<Corrupted, DataError> {
    let maskable: Vec<usize> = (0..x.len()).filter(|&i| !is_special(x[i])).collect();
    if maskable.is_empty() {
        return Err(DataError::NoMaskableTokens);
    }
    let mut selected = vec![false; x.len()];
    let can_take = |sel: &[bool], p: usize| -> bool {
        !is_special(x[p]) && !sel[p] && (p == 0 || !sel[p - 1]) && (p + 1 >= x.len() || !sel[p + 1])
    };
    if cfg.mask_rate >= 1.0 {
        for &p in &maskable {
            selected[p] = true;
        }
    } else {
        let exact = cfg.mask_rate * maskable.len() as f64;
        let mut target = exact.floor() as usize;
        if rng.random::<f64>() < exact - exact.floor() {
            target += 1;
        }
        let target = target.max(1);
        let span_max = cfg.span_max.max(1);
        let mut count = 0;
        let mut attempts = 0;
        let max_attempts = 64 * maskable.len() + 64;
        while count < target && attempts < max_attempts {
            attempts += 1;
            let start = maskable[rng.random_range(0..maskable.len())];
            let len = rng.random_range(1..=span_max).min(target - count);
            if !can_take(&selected, start) {
                continue;
            }
            selected[start] = true;
            count += 1;
            for p in start + 1..start + len {
                if p >= x.len() || !can_take(&selected, p) {
                    break;
                }
                selected[p] = true;
                count += 1;
            }
        }
    }

    let positions: Vec<usize> = (0..x.len()).filter(|&i| selected[i]).collect();
    let mut tokens = x.to_vec();
    let mut branches = Vec::with_capacity(positions.len());
    let lo = RESERVED_TOKENS as u32;
    for &p in &positions {
        let u = rng.random::<f64>();
        let b = if u < cfg.mask_prob {
            tokens[p] = MASK;
            Branch::Mask
        } else if u < cfg.mask_prob + cfg.random_prob && vocab_size as u32 > lo {
            tokens[p] = rng.random_range(lo..vocab_size as u32);
            Branch::Random
        } else {
            Branch::Keep
        };
        branches.push(b);
    }
    Ok(Corrupted {
        tokens,
        positions,
        branches,
    })
}

// ---------------------------------------------------------------------------
// Batching

/// Corrupted batch: rows are `[CLS] tokens [SEP] [PAD]…`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub x: Vec<Vec<u32>>,
    pub x_tilde: Vec<Vec<u32>>,
    /// Per-row prediction targets (ascending indices).
    pub masked: Vec<Vec<usize>>,
    /// `true` for real (non-pad) positions.
    pub pad_mask: Vec<Vec<bool>>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// Non-pad length of row `b`.
    pub fn valid_len(&self, b: usize) -> usize {
        self.pad_mask[b].iter().filter(|&&v| v).count()
    }

    pub fn total_masked(&self) -> usize {
        self.masked.iter().map(Vec::len).sum()
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in 0..self.len() {
            for row in [&self.x[b], &self.x_tilde[b]] {
                for id in row {
                    h.update(id.to_le_bytes());
                }
            }
            for &p in &self.masked[b] {
                h.update((p as u64).to_le_bytes());
            }
            h.update([0xff]);
        }
        h.finalize().into()
    }
}

/// `[CLS] seq[..n-2] [SEP]` padded to `n`, with its validity mask.
pub fn wrap_sequence(seq: &[u32], n: usize) -> Result<(Vec<u32>, Vec<bool>), DataError> {
    if n < 3 {
        return Err(DataError::SeqLenTooSmall(n));
    }
    let body = &seq[..seq.len().min(n - 2)];
    let mut row = Vec::with_capacity(n);
    row.push(CLS);
    row.extend_from_slice(body);
    row.push(SEP);
    let valid = row.len();
    row.resize(n, PAD);
    let mask = (0..n).map(|i| i < valid).collect();
    Ok((row, mask))
}

/// Wraps, pads and corrupts each sequence. Rows without maskable tokens
/// carry no targets.
pub fn batch<R: Rng>(
    sequences: &[Vec<u32>],
    n: usize,
    vocab_size: usize,
    rng: &mut R,
    cfg: &CorruptionConfig,
) -> Result<MaskedBatch, DataError> {
    if sequences.is_empty() {
        return Err(DataError::NoSequences);
    }
    let mut out = MaskedBatch {
        x: Vec::new(),
        x_tilde: Vec::new(),
        masked: Vec::new(),
        pad_mask: Vec::new(),
    };
    for seq in sequences {
        let (row, mask) = wrap_sequence(seq, n)?;
        let (tilde, positions) = match corrupt(&row, vocab_size, rng, cfg) {
            Ok(c) => (c.tokens, c.positions),
            Err(DataError::NoMaskableTokens) => (row.clone(), Vec::new()),
            Err(e) => return Err(e),
        };
        out.x.push(row);
        out.x_tilde.push(tilde);
        out.masked.push(positions);
        out.pad_mask.push(mask);
    }
    Ok(out)
}

/// Endless deterministic stream of corrupted batches: sequences are shuffled
/// each epoch and re-corrupted on every draw.
pub struct BatchStream {
    sequences: Vec<Vec<u32>>,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
    seq_len: usize,
    batch_size: usize,
    vocab_size: usize,
    corruption: CorruptionConfig,
}

impl BatchStream {
    pub fn new(
        sequences: Vec<Vec<u32>>,
        seq_len: usize,
        batch_size: usize,
        vocab_size: usize,
        corruption: CorruptionConfig,
        seed: u64,
    ) -> Result<Self, DataError> {
        if sequences.is_empty() {
            return Err(DataError::NoSequences);
        }
        if seq_len < 3 {
            return Err(DataError::SeqLenTooSmall(seq_len));
        }
        let mut s = Self {
            order: (0..sequences.len()).collect(),
            sequences,
            cursor: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seq_len,
            batch_size: batch_size.max(1),
            vocab_size,
            corruption,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Result<MaskedBatch, DataError> {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.cursor = 0;
                self.epoch += 1;
                self.order.shuffle(&mut self.rng);
            }
            picked.push(self.sequences[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        batch(
            &picked,
            self.seq_len,
            self.vocab_size,
            &mut self.rng,
            &self.corruption,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("Hello, world!  a-b"),
            vec!["Hello", ",", "world", "!", "a", "-", "b"]
        );
    }

    #[test]
    fn vocab_frequency_order_and_cap() {
        let v = build_vocab("a a b", 100).unwrap();
        assert!(v.id("a") < v.id("b"));
        assert_eq!(v.id("a"), 5);
        let v = build_vocab("c c c b b a", 7).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), UNK);
        // ties break lexicographically
        let v = build_vocab("z y x", 100).unwrap();
        assert_eq!(v.corpus_tokens(), &["x", "y", "z"]);
    }

    #[test]
    fn vocab_deterministic_and_round_trips() {
        let text = "the cat sat on the mat . the end";
        let a = build_vocab(text, 50).unwrap();
        let b = build_vocab(text, 50).unwrap();
        assert_eq!(a.to_file_string(), b.to_file_string());
        let c = Vocab::from_file_str(&a.to_file_string()).unwrap();
        assert_eq!(a, c);
        assert!(matches!(
            build_vocab("   \n", 10),
            Err(DataError::EmptyCorpus)
        ));
        assert!(Vocab::from_file_str("a\na\n").is_err());
    }

    #[test]
    fn forced_branches_mask_everything() {
        let x = vec![7, 8, 9, 10, 11];
        let cfg = CorruptionConfig {
            mask_rate: 1.0,
            span_max: 1,
            mask_prob: 1.0,
            random_prob: 0.0,
        };
        let c = corrupt(&x, 20, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        assert_eq!(c.tokens, vec![MASK; 5]);
        assert_eq!(c.positions, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn corruption_is_seeded() {
        let x: Vec<u32> = (0..200).map(|i| 5 + i % 30).collect();
        let cfg = CorruptionConfig::default();
        let a = corrupt(&x, 40, &mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        let b = corrupt(&x, 40, &mut ChaCha8Rng::seed_from_u64(9), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_skips_specials_and_needs_a_target() {
        let x = vec![CLS, 9, 9, 9, SEP, PAD, PAD];
        let cfg = CorruptionConfig::default();
        for seed in 0..50 {
            let c = corrupt(&x, 40, &mut ChaCha8Rng::seed_from_u64(seed), &cfg).unwrap();
            assert!(!c.positions.is_empty());
            assert!(c.positions.iter().all(|&p| (1..4).contains(&p)));
        }
        assert!(matches!(
            corrupt(
                &[CLS, SEP, PAD],
                40,
                &mut ChaCha8Rng::seed_from_u64(0),
                &cfg
            ),
            Err(DataError::NoMaskableTokens)
        ));
    }

    #[test]
    fn wrap_examples() {
        let (row, mask) = wrap_sequence(&[11, 12], 8).unwrap();
        assert_eq!(row, vec![CLS, 11, 12, SEP, PAD, PAD, PAD, PAD]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4);
        let (row, _) = wrap_sequence(&[5, 6, 7, 8, 9, 10], 5).unwrap();
        assert_eq!(row, vec![CLS, 5, 6, 7, SEP]);
        assert!(matches!(
            wrap_sequence(&[5], 2),
            Err(DataError::SeqLenTooSmall(2))
        ));
    }

    #[test]
    fn batch_never_targets_padding() {
        let seqs = vec![vec![5, 6], vec![7, 8, 9, 10, 11, 12, 13]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let b = batch(&seqs, 8, 20, &mut rng, &CorruptionConfig::default()).unwrap();
            for r in 0..b.len() {
                for &p in &b.masked[r] {
                    assert!(b.pad_mask[r][p]);
                    assert!(!is_special(b.x[r][p]));
                }
            }
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let seqs: Vec<Vec<u32>> = (0..10).map(|i| vec![5 + i, 6 + i, 7 + i]).collect();
        let mk =
            || BatchStream::new(seqs.clone(), 8, 4, 30, CorruptionConfig::default(), 42).unwrap();
        let (mut a, mut b) = (mk(), mk());
        for _ in 0..7 {
            assert_eq!(
                a.next_batch().unwrap().digest(),
                b.next_batch().unwrap().digest()
            );
        }
        assert!(a.epoch() >= 2);
    }
}
