//! BLEU with clipped n-gram precisions and the brevity penalty, plus
//! length-bucketed reporting.

mod report;

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use report::{bucket_label, length_bucket_report, render_csv, render_svg, BucketRow, SystemBuckets, DEFAULT_EDGES};

/// Matched over total candidate n-grams of one order, kept as integers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub matched: u64,
    pub total: u64,
}

impl Precision {
    /// `None` when the candidate has no n-grams of this order.
    pub fn value(self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

fn count_ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram precision: every distinct candidate n-gram is credited at
/// most as often as it occurs in the reference.
pub fn ngram_precision<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Precision {
    let cand = count_ngrams(candidate, n);
    let refs = count_ngrams(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    Precision {
        matched,
        total: candidate.len().saturating_sub(n.saturating_sub(1)) as u64 * u64::from(n > 0),
    }
}

/// 1 when the candidate is longer than the reference, else `exp(1 - r/c)`.
pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub n_max: usize,
    /// One weight per order; must sum to 1.
    pub weights: Vec<f64>,
    /// Add-one smoothing of orders 2 and above.
    pub smooth: bool,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self::uniform(4)
    }
}

impl BleuConfig {
    pub fn uniform(n_max: usize) -> Self {
        Self {
            n_max,
            weights: vec![1.0 / n_max as f64; n_max],
            smooth: false,
        }
    }

    pub fn smoothed(mut self) -> Self {
        self.smooth = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n_max == 0 || self.weights.len() != self.n_max {
            return Err(Error::invalid(format!(
                "need one weight per order (n_max = {}, {} weights)",
                self.n_max,
                self.weights.len()
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("BLEU weights must be non-negative and sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Everything that enters a BLEU score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub precisions: Vec<Precision>,
    /// Weights actually applied; orders the candidate is too short for get 0
    /// and the rest are rescaled to sum to 1.
    pub weights: Vec<f64>,
    pub bp: f64,
    pub score: f64,
    pub c: usize,
    pub r: usize,
}

impl BleuReport {
    pub fn score_percent(&self) -> f64 {
        self.score * 100.0
    }
}

fn score(precisions: Vec<Precision>, c: usize, r: usize, config: &BleuConfig) -> BleuReport {
    let valid: Vec<bool> = precisions.iter().map(|p| p.total > 0).collect();
    let mass: f64 = config.weights.iter().zip(&valid).filter(|(_, &v)| v).map(|(w, _)| w).sum();
    let weights: Vec<f64> = config
        .weights
        .iter()
        .zip(&valid)
        .map(|(&w, &v)| if v && mass > 0.0 { w / mass } else { 0.0 })
        .collect();
    if c == 0 || mass == 0.0 {
        return BleuReport {
            precisions,
            weights,
            bp: 0.0,
            score: 0.0,
            c,
            r,
        };
    }
    let bp = brevity_penalty(c, r);
    let mut log_sum = 0.0;
    let mut zero = false;
    for (order, (p, &w)) in precisions.iter().zip(&weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let (num, den) = if config.smooth && order >= 1 {
            (p.matched + 1, p.total + 1)
        } else {
            (p.matched, p.total)
        };
        if num == 0 {
            zero = true;
            break;
        }
        log_sum += w * (num as f64 / den as f64).ln();
    }
    BleuReport {
        precisions,
        weights,
        bp,
        score: if zero { 0.0 } else { (bp * log_sum.exp()).min(1.0) },
        c,
        r,
    }
}

/// Sentence-level BLEU against a single reference.
pub fn bleu<T: Eq + Hash>(candidate: &[T], reference: &[T], config: &BleuConfig) -> Result<BleuReport> {
    corpus_bleu(&[(candidate, reference)], config)
}

/// Corpus BLEU: n-gram counts and lengths are summed over all pairs before
/// any division.
pub fn corpus_bleu<T, C, R>(pairs: &[(C, R)], config: &BleuConfig) -> Result<BleuReport>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("BLEU needs at least one pair"));
    }
    let mut precisions = vec![Precision::default(); config.n_max];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in pairs {
        let (cand, reference) = (cand.as_ref(), reference.as_ref());
        if reference.is_empty() {
            return Err(Error::invalid("empty reference"));
        }
        c += cand.len();
        r += reference.len();
        for (n, acc) in precisions.iter_mut().enumerate() {
            let p = ngram_precision(cand, reference, n + 1);
            acc.matched += p.matched;
            acc.total += p.total;
        }
    }
    Ok(score(precisions, c, r, config))
}
