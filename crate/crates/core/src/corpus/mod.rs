//! Sentence preprocessing, vocabularies and length-filtered batching of
//! parallel corpora.

mod preprocess;
mod vocab;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use preprocess::{normalize, preprocess, Profile};
pub use vocab::{TokenSequence, Vocabulary, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};

/// Longest sentence, in tokens, kept for training.
pub const DEFAULT_MAX_LEN: usize = 50;

/// Aligned, tokenized sentence pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
    pub src_profile: Profile,
    pub tgt_profile: Profile,
}

impl ParallelCorpus {
    /// Preprocesses raw lines; both sides must have the same number of lines.
    pub fn from_lines<S: AsRef<str>>(
        src: &[S],
        tgt: &[S],
        src_profile: Profile,
        tgt_profile: Profile,
    ) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Misaligned {
                src: src.len(),
                tgt: tgt.len(),
            });
        }
        Ok(Self {
            src: src.iter().map(|l| preprocess(l.as_ref(), src_profile)).collect(),
            tgt: tgt.iter().map(|l| preprocess(l.as_ref(), tgt_profile)).collect(),
            src_profile,
            tgt_profile,
        })
    }

    /// Reads two UTF-8 files aligned by line number.
    pub fn read_files(src: &Path, tgt: &Path, src_profile: Profile, tgt_profile: Profile) -> Result<Self> {
        let s = fs::read_to_string(src)?;
        let t = fs::read_to_string(tgt)?;
        let s: Vec<&str> = s.lines().collect();
        let t: Vec<&str> = t.lines().collect();
        Self::from_lines(&s, &t, src_profile, tgt_profile)
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// One encoded sentence pair and its line index in the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub index: usize,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

/// Encodes every pair whose source is non-empty and whose sides both fit in
/// `max_len` tokens.
pub fn filter_pairs(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<EncodedPair>> {
    let kept: Vec<EncodedPair> = corpus
        .src
        .iter()
        .zip(&corpus.tgt)
        .enumerate()
        .filter(|(_, (s, t))| !s.is_empty() && s.len() <= max_len && t.len() <= max_len)
        .map(|(index, (s, t))| EncodedPair {
            index,
            src: src_vocab.encode(s).ids,
            tgt: tgt_vocab.encode(t).ids,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(kept)
}

/// Pairs padded to the longest source and target in the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Corpus line index of each row.
    pub indices: Vec<usize>,
    pub src: Vec<Vec<usize>>,
    pub tgt: Vec<Vec<usize>>,
    /// `true` at real tokens, `false` at padding.
    pub src_mask: Vec<Vec<bool>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn pad_to(rows: Vec<&[usize]>) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let padded = rows
        .iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(width, PAD);
            v
        })
        .collect();
    let masks = rows
        .iter()
        .map(|r| (0..width).map(|i| i < r.len()).collect())
        .collect();
    (padded, masks)
}

/// Shuffles `pairs` with `seed` and cuts them into padded batches; the last
/// batch may be short.
pub fn batch_pairs(pairs: &[EncodedPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let (src, src_mask) = pad_to(chunk.iter().map(|&i| pairs[i].src.as_slice()).collect());
            let (tgt, tgt_mask) = pad_to(chunk.iter().map(|&i| pairs[i].tgt.as_slice()).collect());
            Batch {
                indices: chunk.iter().map(|&i| pairs[i].index).collect(),
                src,
                tgt,
                src_mask,
                tgt_mask,
            }
        })
        .collect())
}

/// Length filter followed by seeded shuffling and padding.
pub fn make_batches(
    corpus: &ParallelCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    let pairs = filter_pairs(corpus, src_vocab, tgt_vocab, max_len)?;
    batch_pairs(&pairs, batch_size, seed)
}
