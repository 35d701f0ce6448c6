//! Synthetic document task whose ambiguous token can only be resolved from
//! the previous sentence.
//!
//! Source sentences mix content words `w<i>`, exactly one marker `m<k>` and,
//! after the first sentence of a document, one ambiguous token `amb`. The
//! target maps `w<i>` → `W<i>`, `m<k>` → `M<k>` and `amb` → `A<k>` where `k`
//! is the marker of the previous sentence.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TextDocument;
use crate::error::{Error, Result};

pub const AMBIGUOUS: &str = "amb";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskConfig {
    /// Source token types: content words + markers + `amb`.
    pub vocab_size: usize,
    pub markers: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Sentences per document.
    pub doc_len: usize,
    pub docs: usize,
    pub seed: u64,
}

impl Default for ToyTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            markers: 2,
            min_len: 3,
            max_len: 6,
            doc_len: 4,
            docs: 2000,
            seed: 1,
        }
    }
}

impl ToyTaskConfig {
    pub fn content_words(&self) -> usize {
        self.vocab_size.saturating_sub(self.markers + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.markers < 1 {
            return Err(Error::Config("toy task needs at least one marker".into()));
        }
        if self.content_words() < 1 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no content words beside {} markers",
                self.vocab_size, self.markers
            )));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "sentence length range {}..={} must have min >= 2 (marker + amb)",
                self.min_len, self.max_len
            )));
        }
        if self.doc_len < 1 {
            return Err(Error::Config("doc_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// The gold target token for `amb` preceded by marker `k`.
pub fn ambiguous_target(marker: usize) -> String {
    format!("A{marker}")
}

pub fn is_ambiguous_target(token: &str) -> bool {
    token
        .strip_prefix('A')
        .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

pub fn gen_toy_corpus(task: &ToyTaskConfig) -> Result<Vec<TextDocument>> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut docs = Vec::with_capacity(task.docs);
    for _ in 0..task.docs {
        let mut doc = TextDocument::default();
        let mut prev_marker = None;
        for _ in 0..task.doc_len {
            let len = rng.random_range(task.min_len..=task.max_len);
            let marker = rng.random_range(0..task.markers);
            let mut slots: Vec<usize> = (0..len).collect();
            slots.shuffle(&mut rng);
            let (src, tgt): (Vec<String>, Vec<String>) = (0..len)
                .map(|p| {
                    if p == slots[0] {
                        (format!("m{marker}"), format!("M{marker}"))
                    } else if let (Some(k), true) = (prev_marker, p == slots[1]) {
                        (AMBIGUOUS.to_string(), ambiguous_target(k))
                    } else {
                        let w = rng.random_range(0..task.content_words());
                        (format!("w{w}"), format!("W{w}"))
                    }
                })
                .unzip();
            doc.src.push(src);
            doc.tgt.push(tgt);
            prev_marker = Some(marker);
        }
        docs.push(doc);
    }
    Ok(docs)
}
