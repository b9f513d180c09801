//! Mixed-task batch composition.
//!
//! Batches are a pure function of (seed, step): each pool is walked through
//! a per-epoch permutation, so resuming at any step reproduces the same
//! batches without replaying earlier ones.

use rand::seq::SliceRandom;

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::rng;
use crate::vocab::TokenSequence;

const POOL_S2T: u64 = 0x0073_3274;
const POOL_MT: u64 = 0x6d74;
const ORDER: u64 = 0x6f72_6472;

/// One aligned training example. Side A is speech (S2T) or source text
/// (MT); side B is the transcript or the translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub a: TokenSequence,
    pub b: TokenSequence,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub a: Vec<TokenSequence>,
    pub b: Vec<TokenSequence>,
    pub tasks: Vec<Task>,
    /// (task, index into that task's pool) for each row.
    pub sources: Vec<(Task, usize)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn count(&self, task: Task) -> usize {
        self.tasks.iter().filter(|&&t| t == task).count()
    }
}

/// Number of MT rows in a batch of `n`: round-half-up of `fraction · n`.
pub fn mt_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 + 0.5).floor() as usize).min(n)
}

/// Indices drawn from a pool of `len` items at `step`, taking `count` per
/// step. Each epoch is a fresh permutation; a tail shorter than `count` is
/// skipped so no batch repeats an item.
fn draw(len: usize, count: usize, seed: u64, pool: u64, step: u64) -> Vec<usize> {
    let per_epoch = (len / count) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng::stream(seed, &[pool, epoch]));
    perm[slot * count..(slot + 1) * count].to_vec()
}

pub fn compose_batch(
    s2t: &[Pair],
    mt: &[Pair],
    batch_size: usize,
    mt_fraction: f64,
    seed: u64,
    step: u64,
) -> Result<PairBatch> {
    let n_mt = mt_count(batch_size, mt_fraction);
    let n_s2t = batch_size - n_mt;
    for (name, pool, need) in [("S2T", s2t, n_s2t), ("MT", mt, n_mt)] {
        if need > 0 && pool.len() < need {
            return Err(Error::Data(format!(
                "{name} pool has {} pairs but each batch needs {need}",
                pool.len()
            )));
        }
    }
    let mut rows: Vec<(Task, usize)> = Vec::with_capacity(batch_size);
    if n_s2t > 0 {
        let idx = draw(s2t.len(), n_s2t, seed, POOL_S2T, step);
        rows.extend(idx.into_iter().map(|i| (Task::S2T, i)));
    }
    if n_mt > 0 {
        let idx = draw(mt.len(), n_mt, seed, POOL_MT, step);
        rows.extend(idx.into_iter().map(|i| (Task::MT, i)));
    }
    rows.shuffle(&mut rng::stream(seed, &[ORDER, step]));
    let mut batch = PairBatch {
        a: Vec::with_capacity(batch_size),
        b: Vec::with_capacity(batch_size),
        tasks: Vec::with_capacity(batch_size),
        sources: rows.clone(),
    };
    for (task, i) in rows {
        let p = if task == Task::MT { &mt[i] } else { &s2t[i] };
        batch.a.push(p.a.clone());
        batch.b.push(p.b.clone());
        batch.tasks.push(p.task);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Modality;
    use std::collections::HashSet;

    fn pool(task: Task, n: usize) -> Vec<Pair> {
        (0..n)
            .map(|i| {
                let s = TokenSequence {
                    ids: vec![i],
                    modality: Modality::Text,
                    language: "en_us".into(),
                    prefix_len: 0,
                };
                Pair {
                    a: s.clone(),
                    b: s,
                    task,
                }
            })
            .collect()
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(mt_count(8, 0.25), 2);
        assert_eq!(mt_count(64, 0.25), 16);
        assert_eq!(mt_count(10, 0.25), 3);
        assert_eq!(mt_count(2, 0.25), 1);
        assert_eq!(mt_count(7, 0.0), 0);
        assert_eq!(mt_count(7, 1.0), 7);
    }

    #[test]
    fn composition_counts() {
        let (s, m) = (pool(Task::S2T, 20), pool(Task::MT, 20));
        let b = compose_batch(&s, &m, 8, 0.25, 1, 0).unwrap();
        assert_eq!((b.count(Task::MT), b.count(Task::S2T)), (2, 6));
        let b = compose_batch(&s, &[], 8, 0.0, 1, 0).unwrap();
        assert_eq!(b.count(Task::S2T), 8);
        assert!(matches!(
            compose_batch(&s, &[], 8, 0.25, 1, 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn each_item_at_most_once_per_epoch() {
        let (s, m) = (pool(Task::S2T, 50), pool(Task::MT, 13));
        let per_epoch = 50 / 6;
        let mut seen = HashSet::new();
        for step in 0..per_epoch as u64 {
            let b = compose_batch(&s, &m, 8, 0.25, 9, step).unwrap();
            for &(task, i) in &b.sources {
                if task == Task::S2T {
                    assert!(seen.insert(i), "item {i} repeated");
                }
            }
        }
        assert_eq!(seen.len(), per_epoch * 6);
    }

    #[test]
    fn pure_function_of_seed_and_step() {
        let (s, m) = (pool(Task::S2T, 30), pool(Task::MT, 30));
        let a = compose_batch(&s, &m, 8, 0.5, 3, 17).unwrap();
        assert_eq!(a, compose_batch(&s, &m, 8, 0.5, 3, 17).unwrap());
        assert_ne!(a, compose_batch(&s, &m, 8, 0.5, 3, 18).unwrap());
        assert_ne!(a, compose_batch(&s, &m, 8, 0.5, 4, 17).unwrap());
    }
}
