//! Audio tokenizer: a k-means codebook over speech feature frames and
//! nearest-centroid quantization of frame sequences into audio tokens.
//!
//! Codebook file layout (all integers little-endian):
//!
//! | bytes          | content                                          |
//! |----------------|--------------------------------------------------|
//! | 0..4           | magic `DSCB`                                     |
//! | 4..8           | `u32` length `H` of the JSON header              |
//! | 8..8+H         | JSON `{"k", "dim", "frame_rate_hz", "seed"}`     |
//! | 8+H..          | `k * dim` `f32` centroids, row-major             |

use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{fsutil, par, rng};

pub const DEFAULT_FRAME_RATE_HZ: f32 = 25.0;
pub const DEFAULT_CODEBOOK_SIZE: usize = 512;

const MAGIC: &[u8; 4] = b"DSCB";
/// Frames per work unit in the assignment step.
const ASSIGN_CHUNK: usize = 4096;

/// k centroids in feature space; the audio-token vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    pub frame_rate_hz: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CodebookHeader {
    pub k: usize,
    pub dim: usize,
    pub frame_rate_hz: f32,
    pub seed: u64,
}

/// L×dim feature frames for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<f32>,
    pub dim: usize,
    pub source_id: String,
    pub language: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<f32>, dim: usize, source_id: &str, language: &str) -> Result<Self> {
        if dim == 0 || frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "{source_id}: {} values do not form frames of dim {dim}",
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            dim,
            source_id: source_id.to_string(),
            language: language.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Result of [`fit_codebook`].
#[derive(Debug, Clone)]
pub struct FitReport {
    pub codebook: Codebook,
    /// Distortion of the assignment made at each Lloyd iteration.
    pub distortions: Vec<f64>,
    pub iterations: usize,
    /// Number of empty-cluster re-seeds performed.
    pub repairs: usize,
    /// Centroid indices that duplicate an earlier centroid (data had fewer
    /// distinct points than k).
    pub collapsed: Vec<usize>,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f32>, frame_rate_hz: f32, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Codebook(format!("k must be at least 2, got {k}")));
        }
        if dim == 0 || centroids.len() != k * dim {
            return Err(Error::Codebook(format!(
                "expected {k}x{dim} centroids, got {} values",
                centroids.len()
            )));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Codebook("non-finite centroid".into()));
        }
        Ok(Self {
            k,
            dim,
            centroids,
            frame_rate_hz,
            seed,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn header(&self) -> CodebookHeader {
        CodebookHeader {
            k: self.k,
            dim: self.dim,
            frame_rate_hz: self.frame_rate_hz,
            seed: self.seed,
        }
    }

    /// Index and squared distance of the nearest centroid; ties go to the
    /// lowest index.
    pub fn nearest(&self, frame: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, frame)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let payload = fsutil::f32_le_bytes(self.centroids.iter().copied());
        Ok(fsutil::frame_with_json_header(MAGIC, &header, &payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = fsutil::split_json_header(MAGIC, bytes, "codebook")?;
        let h: CodebookHeader = serde_json::from_slice(header)?;
        if payload.len() != h.k * h.dim * 4 {
            return Err(Error::Integrity(format!(
                "codebook: expected {} centroid bytes, found {}",
                h.k * h.dim * 4,
                payload.len()
            )));
        }
        Self::new(h.k, h.dim, fsutil::f32_from_le(payload), h.frame_rate_hz, h.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?)
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f32], dim: usize, frame: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, frame);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

struct Partial {
    assign: Vec<usize>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    distortion: f64,
}

fn assign_step(frames: &[f32], dim: usize, centroids: &[f32], k: usize) -> Partial {
    let parts = par::map_chunks(frames, ASSIGN_CHUNK * dim, |_, chunk| {
        let mut p = Partial {
            assign: Vec::with_capacity(chunk.len() / dim),
            sums: vec![0.0; k * dim],
            counts: vec![0; k],
            distortion: 0.0,
        };
        for f in chunk.chunks_exact(dim) {
            let (c, d) = nearest(centroids, dim, f);
            p.assign.push(c);
            p.counts[c] += 1;
            p.distortion += d;
            for (s, &x) in p.sums[c * dim..(c + 1) * dim].iter_mut().zip(f) {
                *s += x as f64;
            }
        }
        p
    });
    // fixed-order reduction
    let mut total = Partial {
        assign: Vec::with_capacity(frames.len() / dim),
        sums: vec![0.0; k * dim],
        counts: vec![0; k],
        distortion: 0.0,
    };
    for p in parts {
        total.assign.extend(p.assign);
        total.sums.iter_mut().zip(&p.sums).for_each(|(a, b)| *a += b);
        total.counts.iter_mut().zip(&p.counts).for_each(|(a, b)| *a += b);
        total.distortion += p.distortion;
    }
    total
}

fn kmeans_pp_init(frames: &[f32], dim: usize, k: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let n = frames.len() / dim;
    let mut r = rng::stream(seed, &[0x6b6d_6970]);
    let first = r.random_range(0..n);
    let mut centroids = frames[first * dim..(first + 1) * dim].to_vec();
    let mut d2: Vec<f64> = frames
        .chunks_exact(dim)
        .map(|f| sq_dist(f, &centroids[..dim]))
        .collect();
    let mut collapsed = Vec::new();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = r.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // never pick a zero-distance point when positive mass exists
            if d2[chosen] == 0.0 {
                chosen = farthest(&d2);
            }
            chosen
        } else {
            collapsed.push(c);
            farthest(&d2)
        };
        let new = frames[pick * dim..(pick + 1) * dim].to_vec();
        for (d, f) in d2.iter_mut().zip(frames.chunks_exact(dim)) {
            *d = d.min(sq_dist(f, &new));
        }
        centroids.extend(new);
    }
    (centroids, collapsed)
}

fn farthest(d2: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in d2.iter().enumerate() {
        if d > d2[best] {
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ initialization.
///
/// `frames` is a flat `n × dim` array. Stops after `max_iters` iterations or
/// once an assignment repeats the previous one. An empty cluster is re-seeded
/// at the frame farthest from its current centroid. Centroids are returned in
/// ascending lexicographic order.
pub fn fit_codebook(
    frames: &[f32],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<FitReport> {
    if dim == 0 || !frames.len().is_multiple_of(dim) {
        return Err(Error::Codebook(format!(
            "{} values do not form frames of dim {dim}",
            frames.len()
        )));
    }
    if k < 2 {
        return Err(Error::Codebook(format!("k must be at least 2, got {k}")));
    }
    if max_iters == 0 {
        return Err(Error::Codebook("max_iters must be at least 1".into()));
    }
    let n = frames.len() / dim;
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} frames for a codebook of {k} centroids"
        )));
    }
    if frames.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("codebook training frames".into()));
    }

    let (mut centroids, collapsed) = kmeans_pp_init(frames, dim, k, seed);
    if !collapsed.is_empty() {
        warn!(
            "k-means: only {} distinct frames for k={k}; {} centroids collapsed",
            k - collapsed.len(),
            collapsed.len()
        );
    }
    let run = lloyd(frames, dim, &mut centroids, k, max_iters);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&centroids[a * dim..(a + 1) * dim], &centroids[b * dim..(b + 1) * dim]);
        ca.iter()
            .zip(cb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let sorted: Vec<f32> = order
        .iter()
        .flat_map(|&c| centroids[c * dim..(c + 1) * dim].iter().copied())
        .collect();
    let collapsed = duplicate_rows(&sorted, dim);
    let codebook = Codebook::new(k, dim, sorted, DEFAULT_FRAME_RATE_HZ, seed)?;
    Ok(FitReport {
        codebook,
        distortions: run.distortions,
        iterations: run.iterations,
        repairs: run.repairs,
        collapsed,
    })
}

struct LloydRun {
    distortions: Vec<f64>,
    iterations: usize,
    repairs: usize,
}

fn lloyd(frames: &[f32], dim: usize, centroids: &mut [f32], k: usize, max_iters: usize) -> LloydRun {
    let n = frames.len() / dim;
    let mut distortions = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut repairs = 0;
    let mut iterations = 0;
    for _ in 0..max_iters {
        iterations += 1;
        let step = assign_step(frames, dim, centroids, k);
        let distortion = step.distortion / n as f64;
        if let Some(&last) = distortions.last() {
            debug_assert!(distortion <= last * (1.0 + 1e-12), "distortion increased");
        }
        distortions.push(distortion);
        if previous.as_ref() == Some(&step.assign) {
            break;
        }
        for c in 0..k {
            let dst = &mut centroids[c * dim..(c + 1) * dim];
            if step.counts[c] > 0 {
                let inv = 1.0 / step.counts[c] as f64;
                for (d, &s) in dst.iter_mut().zip(&step.sums[c * dim..(c + 1) * dim]) {
                    *d = (s * inv) as f32;
                }
            }
        }
        // empty clusters: move to the frame with the largest error
        let empties: Vec<usize> = (0..k).filter(|&c| step.counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut errs: Vec<f64> = frames
                .chunks_exact(dim)
                .zip(&step.assign)
                .map(|(f, &a)| sq_dist(f, &centroids[a * dim..(a + 1) * dim]))
                .collect();
            for c in empties {
                let far = farthest(&errs);
                let src = frames[far * dim..(far + 1) * dim].to_vec();
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&src);
                errs[far] = 0.0;
                repairs += 1;
            }
        }
        previous = Some(step.assign);
    }

    LloydRun {
        distortions,
        iterations,
        repairs,
    }
}

fn duplicate_rows(centroids: &[f32], dim: usize) -> Vec<usize> {
    let rows: Vec<&[f32]> = centroids.chunks_exact(dim).collect();
    (1..rows.len())
        .filter(|&i| rows[..i].contains(&rows[i]))
        .collect()
}

/// Nearest-centroid token for every frame of `seq`.
pub fn quantize(seq: &FrameSequence, cb: &Codebook) -> Result<Vec<usize>> {
    if seq.dim != cb.dim {
        return Err(Error::Codebook(format!(
            "{}: frame dim {} does not match codebook dim {}",
            seq.source_id, seq.dim, cb.dim
        )));
    }
    Ok(seq
        .frames
        .chunks_exact(cb.dim)
        .map(|f| cb.nearest(f).0)
        .collect())
}

/// [`quantize`] over many sequences, in parallel when enabled.
pub fn quantize_all(seqs: &[FrameSequence], cb: &Codebook) -> Result<Vec<Vec<usize>>> {
    par::map(seqs, |s| quantize(s, cb)).into_iter().collect()
}

/// Mean squared distance from each frame to its nearest centroid.
pub fn distortion(frames: &[f32], dim: usize, cb: &Codebook) -> Result<f64> {
    if dim != cb.dim || !frames.len().is_multiple_of(dim) {
        return Err(Error::Codebook(format!(
            "frame dim {dim} does not match codebook dim {}",
            cb.dim
        )));
    }
    let n = frames.len() / dim;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(assign_step(frames, dim, &cb.centroids, cb.k).distortion / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// Exhaustive 2-partition oracle for 1-D data.
    fn best_two_partition(points: &[f64]) -> (f64, f64) {
        let n = points.len();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1..(1u32 << n) - 1 {
            let (a, b): (Vec<f64>, Vec<f64>) = {
                let mut a = vec![];
                let mut b = vec![];
                for (i, &p) in points.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        a.push(p)
                    } else {
                        b.push(p)
                    }
                }
                (a, b)
            };
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
                + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma.min(mb), ma.max(mb));
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn two_blob_1d_recovers_centroids() {
        let pts = [0.0f32, 0.0, 10.0, 10.0];
        let oracle = best_two_partition(&pts.map(|x| x as f64));
        assert_eq!(oracle, (0.0, 10.0));
        for seed in 0..10 {
            let fit = fit_codebook(&pts, 1, 2, 20, seed).unwrap();
            let c = fit.codebook.centroids();
            assert!((c[0] as f64 - oracle.0).abs() < 1e-9);
            assert!((c[1] as f64 - oracle.1).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_frames_collapse_and_are_reported() {
        let pts = [3.0f32; 6];
        let fit = fit_codebook(&pts, 1, 2, 10, 1).unwrap();
        assert!(fit.codebook.centroids().contains(&3.0));
        assert_eq!(fit.collapsed, vec![1]);
    }

    #[test]
    fn too_few_frames() {
        let err = fit_codebook(&[1.0, 2.0], 1, 3, 5, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
        assert!(fit_codebook(&[1.0, 2.0, 3.0], 1, 2, 0, 0).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // one far outlier: a poor init can leave a cluster empty; the result
        // must still contain k distinct centroids
        let mut pts = vec![0.0f32; 20];
        pts.extend([1.0, 1.0, 50.0]);
        for seed in 0..20 {
            let fit = fit_codebook(&pts, 1, 3, 50, seed).unwrap();
            assert!(fit.collapsed.is_empty());
            let c = fit.codebook.centroids();
            assert_eq!(c, &[0.0, 1.0, 50.0]);
        }
    }

    #[test]
    fn lloyd_repairs_empty_cluster() {
        let pts = [0.0f32, 1.0, 2.0, 3.0];
        let mut cents = vec![0.5f32, 100.0];
        let run = lloyd(&pts, 1, &mut cents, 2, 20);
        assert!(run.repairs >= 1);
        assert!(run.distortions.windows(2).all(|w| w[1] <= w[0]));
        cents.sort_by(f32::total_cmp);
        assert_eq!(cents, vec![0.0, 2.0]);
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let cb = Codebook::new(2, 1, vec![0.0, 10.0], 25.0, 0).unwrap();
        let seq = FrameSequence::new(vec![9.4, 5.0, 0.1], 1, "u", "en_us").unwrap();
        assert_eq!(quantize(&seq, &cb).unwrap(), vec![1, 0, 0]);
        let bad = FrameSequence::new(vec![1.0, 2.0], 2, "u", "en_us").unwrap();
        assert!(matches!(quantize(&bad, &cb), Err(Error::Codebook(_))));
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut r = rng::stream(5, &[]);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let dim = 3;
        let cents: Vec<f32> = (0..8 * dim).map(|_| normal.sample(&mut r)).collect();
        let cb = Codebook::new(8, dim, cents.clone(), 25.0, 0).unwrap();
        let frames: Vec<f32> = (0..200 * dim).map(|_| normal.sample(&mut r)).collect();
        let seq = FrameSequence::new(frames.clone(), dim, "x", "en_us").unwrap();
        let got = quantize(&seq, &cb).unwrap();
        for (f, &tok) in frames.chunks(dim).zip(&got) {
            let dists: Vec<f64> = cents.chunks(dim).map(|c| sq_dist(c, f)).collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(tok, first);
            assert!(tok < 8);
        }
    }

    #[test]
    fn distortion_examples() {
        let cb = Codebook::new(2, 1, vec![0.0, 10.0], 25.0, 0).unwrap();
        assert_eq!(distortion(&[0.0, 10.0], 1, &cb).unwrap(), 0.0);
        let single = Codebook::new(2, 1, vec![5.0, 5.0], 25.0, 0).unwrap();
        assert_eq!(distortion(&[0.0, 10.0], 1, &single).unwrap(), 25.0);
    }

    #[test]
    fn fit_is_deterministic() {
        let mut r = rng::stream(9, &[]);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let frames: Vec<f32> = (0..300 * 2).map(|_| normal.sample(&mut r)).collect();
        let a = fit_codebook(&frames, 2, 6, 30, 4).unwrap();
        let b = fit_codebook(&frames, 2, 6, 30, 4).unwrap();
        assert_eq!(a.codebook, b.codebook);
        assert_eq!(a.distortions, b.distortions);
    }

    #[test]
    fn codebook_file_round_trip_and_truncation() {
        let cb = Codebook::new(3, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5], 25.0, 11).unwrap();
        let bytes = cb.to_bytes().unwrap();
        assert_eq!(Codebook::from_bytes(&bytes).unwrap(), cb);
        assert!(matches!(
            Codebook::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Integrity(_))
        ));
    }
}
