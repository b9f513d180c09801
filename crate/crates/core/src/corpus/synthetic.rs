//! Synthetic multilingual corpus.
//!
//! A sentence is a sequence of distinct concept ids. Its text in language L
//! is the concepts rendered through L's pseudo-word table; its speech in L
//! is `frames_per_concept` frames per concept, each the concept's base
//! vector plus L's feature shift plus Gaussian noise. Concept ids are shared
//! by all languages, so speech in one language and text in another can
//! describe the same sentence.
//!
//! Output directory layout:
//!
//! ```text
//! generator.json     the SyntheticSpec used
//! s2t_train.jsonl    speech + transcript, every speech language
//! s2t_test.jsonl
//! mt_train.jsonl     text + translation, one block per MT pair
//! s2tt_test.jsonl    speech + translation into another language
//! frames/<id>.frm
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_frames, write_manifest, FrameFile, ManifestRecord, Task, Translation};
use crate::error::{Error, Result};
use crate::{fsutil, rng};
use crate::vocab::lang;

const BASE: u64 = 0x6261_7365;
const SHIFT: u64 = 0x7368_6966;
const SURFACE: u64 = 0x7375_7266;
const SAMPLE: u64 = 0x7361_6d70;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Languages with speech; each gets S2T train and test splits.
    pub speech_languages: Vec<String>,
    /// (source, target) text pairs for MT training.
    pub mt_pairs: Vec<(String, String)>,
    /// (speech language, target text language) held-out test pairs.
    pub s2tt_pairs: Vec<(String, String)>,
    pub train_per_language: usize,
    pub test_per_language: usize,
    pub mt_per_pair: usize,
    pub concept_vocab: usize,
    pub min_concepts: usize,
    pub max_concepts: usize,
    pub frames_per_concept: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub language_shift_std: f64,
    pub frame_rate_hz: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            speech_languages: vec!["fr_fr".into(), "de_de".into()],
            mt_pairs: Vec::new(),
            s2tt_pairs: Vec::new(),
            train_per_language: 512,
            test_per_language: 128,
            mt_per_pair: 512,
            concept_vocab: 64,
            min_concepts: 3,
            max_concepts: 6,
            frames_per_concept: 4,
            feature_dim: 16,
            noise_std: 0.1,
            language_shift_std: 0.05,
            frame_rate_hz: crate::audio::DEFAULT_FRAME_RATE_HZ,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Every language mentioned, in first-mention order.
    pub fn languages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let all = self
            .speech_languages
            .iter()
            .chain(self.mt_pairs.iter().flat_map(|(a, b)| [a, b]))
            .chain(self.s2tt_pairs.iter().flat_map(|(a, b)| [a, b]));
        for l in all {
            if !out.contains(l) {
                out.push(l.clone());
            }
        }
        out
    }

    fn sentences_needed(&self) -> usize {
        self.speech_languages.len() * (self.train_per_language + self.test_per_language)
            + self.mt_pairs.len() * self.mt_per_pair
            + self.s2tt_pairs.len() * self.test_per_language
    }

    /// Number of distinct sentences of distinct concepts the spec allows.
    fn capacity(&self) -> f64 {
        (self.min_concepts..=self.max_concepts)
            .map(|len| {
                (0..len)
                    .map(|i| self.concept_vocab.saturating_sub(i) as f64)
                    .product::<f64>()
            })
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("synthetic corpus: {m}")));
        for l in self.languages() {
            lang::lookup(&l)?;
        }
        for (a, _) in &self.s2tt_pairs {
            if !self.speech_languages.contains(a) {
                return fail(format!("S2TT source {a} is not a speech language"));
            }
        }
        if self.min_concepts == 0 || self.min_concepts > self.max_concepts {
            return fail(format!(
                "concepts per sentence range {}..={} is empty",
                self.min_concepts, self.max_concepts
            ));
        }
        if self.concept_vocab < self.max_concepts {
            return fail(format!(
                "concept vocabulary of {} cannot fill sentences of {} distinct concepts",
                self.concept_vocab, self.max_concepts
            ));
        }
        if self.capacity() < 2.0 * self.sentences_needed() as f64 {
            return fail(format!(
                "concept vocabulary of {} is too small for {} distinct sentences",
                self.concept_vocab,
                self.sentences_needed()
            ));
        }
        if self.frames_per_concept == 0 || self.feature_dim == 0 {
            return fail("frames_per_concept and feature_dim must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.language_shift_std >= 0.0) {
            return fail("noise and shift must be non-negative".into());
        }
        Ok(())
    }
}

/// Generated records and frames, not yet on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub s2t_train: Vec<ManifestRecord>,
    pub s2t_test: Vec<ManifestRecord>,
    pub mt_train: Vec<ManifestRecord>,
    pub s2tt_test: Vec<ManifestRecord>,
    /// Keyed by the records' `frames_path`.
    pub frames: BTreeMap<String, FrameFile>,
    /// Per language, the pseudo-word for each concept.
    pub surface: BTreeMap<String, Vec<String>>,
}

impl SyntheticCorpus {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fsutil::write_atomic(
            &dir.join("generator.json"),
            &serde_json::to_vec_pretty(&self.spec)?,
        )?;
        write_manifest(&dir.join("s2t_train.jsonl"), &self.s2t_train)?;
        write_manifest(&dir.join("s2t_test.jsonl"), &self.s2t_test)?;
        write_manifest(&dir.join("mt_train.jsonl"), &self.mt_train)?;
        write_manifest(&dir.join("s2tt_test.jsonl"), &self.s2tt_test)?;
        for (rel, f) in &self.frames {
            write_frames(&dir.join(rel), f)?;
        }
        Ok(())
    }
}

/// FNV-1a, so per-language streams depend on the code, not on its position.
fn code_tag(code: &str) -> u64 {
    code.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn surface_table(seed: u64, code: &str, n: usize) -> Vec<String> {
    let mut r = rng::stream(seed, &[SURFACE, code_tag(code)]);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = r.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[r.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[r.random_range(0..VOWELS.len())] as char);
        }
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn gaussian_rows(r: &mut ChaCha8Rng, rows: usize, dim: usize, std: f64) -> Vec<f32> {
    let normal = Normal::new(0.0, std.max(0.0)).expect("finite std");
    (0..rows * dim).map(|_| normal.sample(r) as f32).collect()
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    base: Vec<f32>,
    shifts: BTreeMap<String, Vec<f32>>,
    surface: BTreeMap<String, Vec<String>>,
    used: HashSet<Vec<usize>>,
    r: ChaCha8Rng,
    noise: Normal<f64>,
    frames: BTreeMap<String, FrameFile>,
}

impl Generator<'_> {
    fn sentence(&mut self) -> Vec<usize> {
        let s = self.spec;
        loop {
            let len = self.r.random_range(s.min_concepts..=s.max_concepts);
            let mut ids: Vec<usize> = (0..s.concept_vocab).collect();
            let (chosen, _) = ids.partial_shuffle(&mut self.r, len);
            let seq = chosen.to_vec();
            if self.used.insert(seq.clone()) {
                return seq;
            }
        }
    }

    fn render(&self, code: &str, concepts: &[usize]) -> String {
        let table = &self.surface[code];
        concepts
            .iter()
            .map(|&c| table[c].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn speak(&mut self, id: &str, code: &str, concepts: &[usize]) -> String {
        let (dim, fpc) = (self.spec.feature_dim, self.spec.frames_per_concept);
        let shift = &self.shifts[code];
        let mut frames = Vec::with_capacity(concepts.len() * fpc * dim);
        for &c in concepts {
            let base = &self.base[c * dim..(c + 1) * dim];
            for _ in 0..fpc {
                for d in 0..dim {
                    frames.push(base[d] + shift[d] + self.noise.sample(&mut self.r) as f32);
                }
            }
        }
        let rel = format!("frames/{id}.frm");
        self.frames.insert(
            rel.clone(),
            FrameFile {
                dim,
                frame_rate_hz: self.spec.frame_rate_hz,
                frames,
            },
        );
        rel
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let languages = spec.languages();
    let mut g = Generator {
        spec,
        base: gaussian_rows(&mut rng::stream(spec.seed, &[BASE]), spec.concept_vocab, dim, 1.0),
        shifts: languages
            .iter()
            .map(|l| {
                let mut r = rng::stream(spec.seed, &[SHIFT, code_tag(l)]);
                (l.clone(), gaussian_rows(&mut r, 1, dim, spec.language_shift_std))
            })
            .collect(),
        surface: languages
            .iter()
            .map(|l| (l.clone(), surface_table(spec.seed, l, spec.concept_vocab)))
            .collect(),
        used: HashSet::new(),
        r: rng::stream(spec.seed, &[SAMPLE]),
        noise: Normal::new(0.0, spec.noise_std).expect("validated std"),
        frames: BTreeMap::new(),
    };
    let mut s2t_train = Vec::new();
    let mut s2t_test = Vec::new();
    for code in &spec.speech_languages {
        for (split, count, out) in [
            ("train", spec.train_per_language, &mut s2t_train),
            ("test", spec.test_per_language, &mut s2t_test),
        ] {
            for i in 0..count {
                let id = format!("{code}-{split}-{i:05}");
                let concepts = g.sentence();
                let frames_path = g.speak(&id, code, &concepts);
                out.push(ManifestRecord {
                    id,
                    language: code.clone(),
                    task: Task::S2T,
                    frames_path: Some(frames_path),
                    transcript: Some(g.render(code, &concepts)),
                    translation: None,
                    concepts: Some(concepts),
                });
            }
        }
    }
    let mut mt_train = Vec::new();
    for (src, tgt) in &spec.mt_pairs {
        for i in 0..spec.mt_per_pair {
            let concepts = g.sentence();
            mt_train.push(ManifestRecord {
                id: format!("{src}-{tgt}-mt-{i:05}"),
                language: src.clone(),
                task: Task::MT,
                frames_path: None,
                transcript: Some(g.render(src, &concepts)),
                translation: Some(Translation {
                    target_lang: tgt.clone(),
                    text: g.render(tgt, &concepts),
                }),
                concepts: Some(concepts),
            });
        }
    }
    let mut s2tt_test = Vec::new();
    for (src, tgt) in &spec.s2tt_pairs {
        for i in 0..spec.test_per_language {
            let id = format!("{src}-{tgt}-s2tt-{i:05}");
            let concepts = g.sentence();
            let frames_path = g.speak(&id, src, &concepts);
            s2tt_test.push(ManifestRecord {
                id,
                language: src.clone(),
                task: Task::S2TT,
                frames_path: Some(frames_path),
                transcript: Some(g.render(src, &concepts)),
                translation: Some(Translation {
                    target_lang: tgt.clone(),
                    text: g.render(tgt, &concepts),
                }),
                concepts: Some(concepts),
            });
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        s2t_train,
        s2t_test,
        mt_train,
        s2tt_test,
        frames: g.frames,
        surface: g.surface,
    })
}
