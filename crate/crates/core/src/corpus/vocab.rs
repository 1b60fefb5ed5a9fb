use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<PAD>", "<UNK>", "<BOS>", "<EOS>"];

/// Token to id mapping with four reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

/// Encoded sentence together with its surface tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub raw: Vec<String>,
}

impl Vocabulary {
    /// A vocabulary holding the reserved tokens followed by `tokens`.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            ids: HashMap::new(),
        };
        for tok in tokens {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(|c| c == '\n' || c == '\r') {
                return Err(Error::invalid(format!("token {tok:?} cannot be stored")));
            }
            if SPECIAL_TOKENS.contains(&tok.as_str()) || v.ids.contains_key(&tok) {
                return Err(Error::invalid(format!("duplicate token {tok:?}")));
            }
            v.ids.insert(tok.clone(), v.tokens.len());
            v.tokens.push(tok);
        }
        Ok(v)
    }

    /// Ranks tokens by descending frequency (ties lexicographic), drops those
    /// seen fewer than `min_freq` times, and keeps at most `max_size` entries
    /// including the reserved ones.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], max_size: usize, min_freq: usize) -> Result<Self> {
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for tok in sentences.iter().flatten() {
            *counts.entry(tok.as_ref()).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size.saturating_sub(SPECIAL_TOKENS.len()));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        if let Some(pos) = SPECIAL_TOKENS.iter().position(|s| *s == token) {
            return pos;
        }
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.tokens.len() })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    /// Non-reserved tokens in id order.
    pub fn regular_tokens(&self) -> &[String] {
        &self.tokens[SPECIAL_TOKENS.len()..]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSequence {
        TokenSequence {
            ids: tokens.iter().map(|t| self.id(t.as_ref())).collect(),
            raw: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    /// One regular token per line; line `i` holds id `i + 4`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in self.regular_tokens() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
