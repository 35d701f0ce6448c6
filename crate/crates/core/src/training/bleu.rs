//! Corpus-level BLEU with clipped n-gram precision and brevity penalty.

use std::collections::HashMap;

use crate::corpus::SPECIALS;
use crate::error::{Error, Result};

fn ngrams(tokens: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect())
                .or_insert(0) += 1;
        }
    }
    out
}

fn strip_pad(s: &[String]) -> Vec<&str> {
    s.iter()
        .map(String::as_str)
        .filter(|&t| t != SPECIALS[0])
        .collect()
}

/// BLEU over parallel lists of tokenized hypotheses and references. No
/// smoothing: any zero precision gives 0. PAD tokens are ignored.
pub fn bleu(hypotheses: &[Vec<String>], references: &[Vec<String>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::InvalidArgument("no references".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be >= 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        let h = strip_pad(h);
        let rf = strip_pad(rf);
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hn = ngrams(&h, n);
            let rn = ngrams(&rf, n);
            for (g, &count) in &hn {
                matched[n - 1] += count.min(rn.get(g).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if matched[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / max_n as f64).exp())
}
