//! Seeded toy parallel corpora for smoke tests and experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Source and target lines, aligned by index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let at = self.src.len().saturating_sub(n);
        let tail = Self {
            src: self.src.split_off(at),
            tgt: self.tgt.split_off(at),
        };
        (self, tail)
    }
}

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::invalid(format!("bad length range {min_len}..={max_len}")));
    }
    Ok(())
}

/// Random sentences over `vocab` tokens `w0..w{vocab-1}`, each translated to
/// itself.
pub fn copy_corpus(pairs: usize, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> Result<SyntheticCorpus> {
    check_lengths(min_len, max_len)?;
    if vocab == 0 {
        return Err(Error::invalid("vocab must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<String> = (0..pairs)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            (0..len)
                .map(|_| format!("w{}", rng.gen_range(0..vocab)))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    Ok(SyntheticCorpus { tgt: src.clone(), src })
}

/// Layout of a [`topic_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct TopicSpec {
    pub topics: usize,
    /// Topic-specific source words per topic.
    pub topic_words: usize,
    /// Words shared by all topics whose translation depends on the topic.
    pub shared_words: usize,
    /// Probability that a position holds a topic word rather than a shared one.
    pub topic_rate: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TopicSpec {
    fn default() -> Self {
        Self {
            topics: 2,
            topic_words: 8,
            shared_words: 6,
            topic_rate: 0.5,
            min_len: 4,
            max_len: 10,
        }
    }
}

fn topic_letter(t: usize) -> char {
    (b'a' + (t % 26) as u8) as char
}

/// Source word `i` of topic `t`, e.g. `ta3`.
pub fn topic_word(t: usize, i: usize) -> String {
    format!("t{}{i}", topic_letter(t))
}

/// Topic of a source word produced by [`topic_corpus`]; `None` for shared
/// words.
pub fn topic_of(word: &str) -> Option<usize> {
    let mut chars = word.chars();
    if chars.next() != Some('t') {
        return None;
    }
    let letter = chars.next()?;
    if !letter.is_ascii_lowercase() || !chars.as_str().chars().all(|c| c.is_ascii_digit()) || chars.as_str().is_empty() {
        return None;
    }
    Some((letter as u8 - b'a') as usize)
}

/// Every sentence belongs to one topic. Topic words `t{x}{i}` translate to
/// `x{x}{i}`; shared words `s{j}` translate to `p{x}{j}`, so translating a
/// shared word requires knowing which topic's words surround it. Each
/// sentence contains at least one topic word.
pub fn topic_corpus(pairs: usize, spec: &TopicSpec, seed: u64) -> Result<SyntheticCorpus> {
    check_lengths(spec.min_len, spec.max_len)?;
    if spec.topics == 0 || spec.topics > 26 || spec.topic_words == 0 {
        return Err(Error::invalid("need 1..=26 topics with at least one word each"));
    }
    if !(0.0..=1.0).contains(&spec.topic_rate) {
        return Err(Error::invalid("topic_rate outside [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::with_capacity(pairs);
    let mut tgt = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let t = rng.gen_range(0..spec.topics);
        let x = topic_letter(t);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let anchor = rng.gen_range(0..len);
        let mut s = Vec::with_capacity(len);
        let mut o = Vec::with_capacity(len);
        for pos in 0..len {
            if pos == anchor || spec.shared_words == 0 || rng.gen_bool(spec.topic_rate) {
                let i = rng.gen_range(0..spec.topic_words);
                s.push(topic_word(t, i));
                o.push(format!("x{x}{i}"));
            } else {
                let j = rng.gen_range(0..spec.shared_words);
                s.push(format!("s{j}"));
                o.push(format!("p{x}{j}"));
            }
        }
        src.push(s.join(" "));
        tgt.push(o.join(" "));
    }
    Ok(SyntheticCorpus { src, tgt })
}
