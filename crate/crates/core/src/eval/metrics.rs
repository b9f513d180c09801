//! Word error rate and corpus BLEU.
//!
//! BLEU conventions: case is preserved; text is split on whitespace and
//! every character that is neither alphanumeric nor whitespace becomes its
//! own token; n-gram precisions for n = 1..4 are clipped against a single
//! reference and summed over the corpus; no smoothing, so any zero
//! precision gives 0; brevity penalty exp(min(0, 1 − r/h)) with corpus
//! lengths r (reference) and h (hypothesis).

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Word-level edit distance with unit substitution, insertion and deletion
/// costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// (S + D + I) / |reference|.
pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Contract("WER needs a non-empty reference".into()));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer(references: &[String], hypotheses: &[String]) -> Result<f64> {
    if references.len() != hypotheses.len() {
        return Err(Error::Contract(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut edits = 0;
    let mut total = 0;
    for (r, h) in references.iter().zip(hypotheses) {
        let (r, h) = (words(r), words(h));
        edits += levenshtein(&r, &h);
        total += r.len();
    }
    if total == 0 {
        return Err(Error::Contract("WER needs a non-empty reference".into()));
    }
    Ok(edits as f64 / total as f64)
}

pub fn bleu_tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in s.chars() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_alphanumeric() {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Sufficient statistics: clipped matches and totals per order, lengths.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / 4.0;
        let bp = (1.0 - self.ref_len as f64 / self.hyp_len as f64).min(0.0).exp();
        100.0 * bp * log_p.exp()
    }
}

pub fn bleu_stats(hypotheses: &[String], references: &[String]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut st = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (bleu_tokenize(h), bleu_tokenize(r));
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                st.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            st.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if st.ref_len == 0 {
        return Err(Error::Contract("BLEU needs at least one non-empty reference".into()));
    }
    Ok(st)
}

/// Corpus BLEU in [0, 100].
pub fn corpus_bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score())
}
