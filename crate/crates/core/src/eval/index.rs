//! Flat dot-product retrieval.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    /// M × p candidate embeddings.
    pub embeddings: Tensor<f32>,
    pub texts: Vec<String>,
    pub languages: Vec<String>,
}

impl RetrievalIndex {
    pub fn new(embeddings: Tensor<f32>, texts: Vec<String>, languages: Vec<String>) -> Result<Self> {
        let m = embeddings.rows();
        if m == 0 || embeddings.shape().len() != 2 {
            return Err(Error::Data("retrieval index needs at least one candidate".into()));
        }
        if texts.len() != m || languages.len() != m {
            return Err(Error::Contract(format!(
                "{m} embeddings but {} texts and {} language tags",
                texts.len(),
                languages.len()
            )));
        }
        if !embeddings.data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("retrieval index embeddings".into()));
        }
        Ok(Self {
            embeddings,
            texts,
            languages,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Dot products of `query` with every candidate, accumulated in f64.
    pub fn scores(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::shape("retrieve", &[query.len()], self.embeddings.shape()));
        }
        if !query.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("retrieval query".into()));
        }
        Ok((0..self.len())
            .map(|i| {
                self.embeddings
                    .row(i)
                    .iter()
                    .zip(query)
                    .fold(0.0, |acc, (&a, &b)| acc + a as f64 * b as f64)
            })
            .collect())
    }
}

/// Candidate indices by descending score, ties by ascending index.
pub fn retrieve_top_k(query: &[f32], index: &RetrievalIndex, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > index.len() {
        return Err(Error::Contract(format!(
            "k = {k} outside 1..={}",
            index.len()
        )));
    }
    let s = index.scores(query)?;
    let mut order: Vec<usize> = (0..s.len()).collect();
    if k == 1 {
        let best = order
            .iter()
            .copied()
            .reduce(|a, b| if s[b] > s[a] { b } else { a })
            .expect("non-empty");
        return Ok(vec![best]);
    }
    // partial_cmp so that -0.0 and 0.0 tie; scores of finite embeddings are
    // never NaN.
    order.sort_by(|&a, &b| {
        s[b].partial_cmp(&s[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Top-1 candidate for each query row.
pub fn top1_all(queries: &Tensor<f32>, index: &RetrievalIndex) -> Result<Vec<usize>> {
    par::map_range(queries.rows(), |i| {
        retrieve_top_k(queries.row(i), index, 1).map(|v| v[0])
    })
    .into_iter()
    .collect()
}

pub fn recall_at_1(queries: &Tensor<f32>, gold: &[usize], index: &RetrievalIndex) -> Result<f64> {
    if gold.len() != queries.rows() {
        return Err(Error::Contract(format!(
            "{} queries but {} gold ids",
            queries.rows(),
            gold.len()
        )));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= index.len()) {
        return Err(Error::Contract(format!("gold id {g} outside index of {}", index.len())));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let top = top1_all(queries, index)?;
    let hits = top.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / gold.len() as f64)
}
