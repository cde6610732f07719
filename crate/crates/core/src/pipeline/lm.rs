//! Character n-gram language model with additive smoothing, used to score
//! caption informativeness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::write_atomic;

/// Padding symbol for contexts before the first character.
const BOUNDARY: char = '\u{2}';

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharNgramModel {
    pub order: usize,
    pub alpha: f64,
    /// Characters seen in training; anything else falls into one shared unknown bucket.
    vocab: BTreeSet<char>,
    /// Context string (length 0..order−1) → next character → count.
    counts: BTreeMap<String, BTreeMap<char, u64>>,
}

impl CharNgramModel {
    pub fn new(order: usize, alpha: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidArgument("n-gram order must be positive".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothing {alpha} must be finite and non-negative")));
        }
        Ok(Self { order, alpha, vocab: BTreeSet::new(), counts: BTreeMap::new() })
    }

    pub fn train<'a>(order: usize, alpha: f64, texts: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut m = Self::new(order, alpha)?;
        for t in texts {
            m.observe(t);
        }
        Ok(m)
    }

    fn padded(&self, text: &str) -> Vec<char> {
        std::iter::repeat_n(BOUNDARY, self.order - 1).chain(text.chars()).collect()
    }

    pub fn observe(&mut self, text: &str) {
        let chars = self.padded(text);
        for i in self.order - 1..chars.len() {
            let c = chars[i];
            self.vocab.insert(c);
            for n in 0..self.order {
                let ctx: String = chars[i - n..i].iter().collect();
                *self.counts.entry(ctx).or_default().entry(c).or_default() += 1;
            }
        }
    }

    pub fn is_trained(&self) -> bool {
        !self.vocab.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// `p(c | context)` using the longest context suffix seen in training.
    pub fn probability(&self, context: &[char], c: char) -> f64 {
        let buckets = (self.vocab.len() + 1) as f64;
        let start = context.len().saturating_sub(self.order - 1);
        for from in start..=context.len() {
            let ctx: String = context[from..].iter().collect();
            if let Some(next) = self.counts.get(&ctx) {
                let total: u64 = next.values().sum();
                let count = next.get(&c).copied().unwrap_or(0) as f64;
                return (count + self.alpha) / (total as f64 + self.alpha * buckets);
            }
        }
        // reachable only for an untrained model
        1.0 / buckets
    }

    /// `exp(−mean ln p)` over the characters of `text`.
    pub fn perplexity(&self, text: &str) -> Result<f64> {
        if !self.is_trained() {
            return Err(Error::InvalidArgument("language model is untrained".into()));
        }
        let chars = self.padded(text);
        let n = chars.len() - (self.order - 1);
        if n == 0 {
            return Ok(f64::INFINITY);
        }
        let mut log_sum = 0.0;
        for i in self.order - 1..chars.len() {
            log_sum += self.probability(&chars[..i], chars[i]).ln();
        }
        Ok((-log_sum / n as f64).exp())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
