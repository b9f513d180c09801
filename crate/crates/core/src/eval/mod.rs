//! Retrieval evaluation: flat dot-product index, R@1, retrieval-WER (the
//! gold transcript against the top-1 retrieved text), and corpus BLEU.

mod index;
pub mod metrics;
mod report;

pub use index::{recall_at_1, retrieve_top_k, top1_all, RetrievalIndex};
pub use metrics::{bleu_stats, bleu_tokenize, corpus_bleu, corpus_wer, levenshtein, wer, BleuStats};
pub use report::{aggregate, describe, Aggregate, EvalReport, LanguageResult, Provenance};

use crate::error::Result;
use crate::numerics::Tensor;

/// Which text metric to compute on the top-1 retrieved candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMetric {
    Wer,
    Bleu,
}

/// Queries and candidates of one language's test pool.
#[derive(Debug, Clone)]
pub struct EvalGroup {
    pub language: String,
    pub queries: Tensor<f32>,
    pub index: RetrievalIndex,
    /// Gold candidate index per query.
    pub gold: Vec<usize>,
}

pub fn score_group(g: &EvalGroup, metric: TextMetric) -> Result<LanguageResult> {
    let top = top1_all(&g.queries, &g.index)?;
    let r_at_1 = recall_at_1(&g.queries, &g.gold, &g.index)?;
    let hyps: Vec<String> = top.iter().map(|&i| g.index.texts[i].clone()).collect();
    let refs: Vec<String> = g.gold.iter().map(|&i| g.index.texts[i].clone()).collect();
    let (wer, bleu) = match metric {
        TextMetric::Wer => (Some(corpus_wer(&refs, &hyps)?), None),
        TextMetric::Bleu => (None, Some(corpus_bleu(&hyps, &refs)?)),
    };
    let (name, group) = describe(&g.language);
    Ok(LanguageResult {
        language: g.language.clone(),
        name,
        group,
        count: g.gold.len(),
        candidates: g.index.len(),
        r_at_1,
        wer,
        bleu,
    })
}
