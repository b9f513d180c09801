//! Unified token space: text ids in `[0, t)`, audio tokens offset into
//! `[t, t + a)`, and "[{Language} {Modality}]" task prefixes.

pub mod lang;
pub mod text;

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
pub use lang::Language;
pub use text::{TextVocab, VocabMode};

pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Speech,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Speech => "Speech",
            Modality::Text => "Text",
        }
    }
}

/// Encoder input: prefix ids followed by the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub modality: Modality,
    pub language: String,
    /// Number of leading ids that belong to the task prefix.
    pub prefix_len: usize,
}

impl TokenSequence {
    pub fn payload(&self) -> &[usize] {
        &self.ids[self.prefix_len..]
    }

    pub fn prefix(&self) -> &[usize] {
        &self.ids[..self.prefix_len]
    }

    /// A sequence with no payload (e.g. zero audio frames) carries no content.
    pub fn is_valid(&self) -> bool {
        self.ids.len() > self.prefix_len
    }

    /// Check the modality range invariant against text size `t` and audio
    /// size `a`.
    pub fn check_ranges(&self, t: usize, a: usize) -> Result<()> {
        for (i, &id) in self.ids.iter().enumerate() {
            let ok = match self.modality {
                Modality::Text => id < t,
                Modality::Speech if i < self.prefix_len => id < t,
                Modality::Speech => (t..t + a).contains(&id),
            };
            if !ok {
                return Err(Error::Vocab { id, size: t + a });
            }
        }
        Ok(())
    }
}

/// Render the task prefix for a language code, e.g. `[French Speech]`.
pub fn render_prefix(lang: &str, modality: Modality) -> Result<String> {
    let l = lang::lookup(lang)?;
    Ok(format!("[{} {}]", l.name, modality.name()))
}

/// Map audio tokens `k ∈ [0, a)` to unified ids `t + k`.
pub fn offset_audio(tokens: &[usize], t: usize, a: usize) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|&k| {
            if k < a {
                Ok(t + k)
            } else {
                Err(Error::Vocab { id: k, size: a })
            }
        })
        .collect()
}

/// Inverse of [`offset_audio`].
pub fn strip_audio_offset(ids: &[usize], t: usize, a: usize) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&id| {
            if (t..t + a).contains(&id) {
                Ok(id - t)
            } else {
                Err(Error::Vocab { id, size: t + a })
            }
        })
        .collect()
}

/// Text vocabulary plus audio vocabulary size and length limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub text: TextVocab,
    pub audio_size: usize,
    pub max_len: usize,
}

/// On-disk form of [`Vocab`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VocabFile {
    pub mode: VocabMode,
    pub t: usize,
    pub a: usize,
    pub max_len: usize,
    pub special_tokens: Vec<String>,
    #[serde(default)]
    pub merges: Vec<(u32, u32)>,
}

impl Vocab {
    pub fn new(text: TextVocab, audio_size: usize, max_len: usize) -> Self {
        Self {
            text,
            audio_size,
            max_len,
        }
    }

    pub fn t(&self) -> usize {
        self.text.size()
    }

    pub fn a(&self) -> usize {
        self.audio_size
    }

    pub fn total(&self) -> usize {
        self.t() + self.a()
    }

    pub fn tokenize_text(&self, s: &str) -> Vec<usize> {
        self.text.tokenize(s)
    }

    fn finish(&self, mut ids: Vec<usize>, prefix_len: usize, modality: Modality, lang: &str) -> TokenSequence {
        if ids.len() > self.max_len {
            warn!(
                "truncating {lang} {} input from {} to {} tokens",
                modality.name(),
                ids.len(),
                self.max_len
            );
            ids.truncate(self.max_len);
        }
        TokenSequence {
            prefix_len: prefix_len.min(ids.len()),
            ids,
            modality,
            language: lang.to_string(),
        }
    }

    /// `tokenize("[{Lang} Speech]") ++ offset_audio(audio_tokens)`.
    pub fn build_speech_input(&self, lang: &str, audio_tokens: &[usize]) -> Result<TokenSequence> {
        let mut ids = self.tokenize_text(&render_prefix(lang, Modality::Speech)?);
        let prefix_len = ids.len();
        ids.extend(offset_audio(audio_tokens, self.t(), self.a())?);
        Ok(self.finish(ids, prefix_len, Modality::Speech, lang))
    }

    /// `tokenize("[{Lang} Text] " + s)`; the separating space belongs to the
    /// payload's first chunk.
    pub fn build_text_input(&self, lang: &str, s: &str) -> Result<TokenSequence> {
        let mut ids = self.tokenize_text(&render_prefix(lang, Modality::Text)?);
        let prefix_len = ids.len();
        if !s.is_empty() {
            ids.extend(self.tokenize_text(&format!(" {s}")));
        }
        Ok(self.finish(ids, prefix_len, Modality::Text, lang))
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            mode: self.text.mode(),
            t: self.t(),
            a: self.a(),
            max_len: self.max_len,
            special_tokens: text::SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            merges: self.text.merges().to_vec(),
        }
    }

    pub fn from_file(f: &VocabFile) -> Result<Self> {
        let specials: Vec<&str> = f.special_tokens.iter().map(String::as_str).collect();
        if specials != text::SPECIAL_TOKENS {
            return Err(Error::Config(format!("unexpected special tokens {specials:?}")));
        }
        let text = TextVocab::from_merges(f.mode, f.merges.clone())?;
        if text.size() != f.t {
            return Err(Error::Config(format!(
                "vocab declares t={} but merges give {}",
                f.t,
                text.size()
            )));
        }
        Ok(Self::new(text, f.a, f.max_len))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.to_file())?;
        fsutil::write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: VocabFile = serde_json::from_slice(&fsutil::read(path)?)?;
        Self::from_file(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(TextVocab::byte_level(), 512, DEFAULT_MAX_LEN)
    }

    #[test]
    fn offset_examples() {
        assert_eq!(
            offset_audio(&[50, 210, 245], 32000, 512).unwrap(),
            vec![32050, 32210, 32245]
        );
        assert_eq!(offset_audio(&[0], 32000, 512).unwrap(), vec![32000]);
        assert!(matches!(
            offset_audio(&[512], 32000, 512),
            Err(Error::Vocab { id: 512, size: 512 })
        ));
        assert_eq!(
            strip_audio_offset(&[32050, 32210, 32245], 32000, 512).unwrap(),
            vec![50, 210, 245]
        );
    }

    #[test]
    fn speech_input_layout() {
        let v = vocab();
        let s = v.build_speech_input("en_us", &[50, 210, 245]).unwrap();
        let t = v.t();
        assert_eq!(v.text.detokenize(s.prefix()), "[English Speech]");
        assert_eq!(s.payload(), &[t + 50, t + 210, t + 245]);
        assert_eq!(s.modality, Modality::Speech);
        s.check_ranges(t, 512).unwrap();
        assert_eq!(s, v.build_speech_input("en_us", &[50, 210, 245]).unwrap());

        let empty = v.build_speech_input("en_us", &[]).unwrap();
        assert!(!empty.is_valid());
        assert_eq!(empty.ids, s.prefix());

        assert!(matches!(
            v.build_speech_input("zz_zz", &[1]),
            Err(Error::UnknownLanguage(_))
        ));
    }

    #[test]
    fn text_input_layout() {
        let v = vocab();
        let s = v.build_text_input("en_us", "Hello World .").unwrap();
        assert_eq!(v.text.detokenize(&s.ids), "[English Text] Hello World .");
        assert!(s.ids.iter().all(|&i| i < v.t()));
        assert_eq!(v.text.detokenize(s.payload()), " Hello World .");
        let empty = v.build_text_input("en_us", "").unwrap();
        assert_eq!(empty.ids.len(), empty.prefix_len);
    }

    #[test]
    fn truncation_from_the_right() {
        let v = Vocab::new(TextVocab::byte_level(), 8, 20);
        let s = v.build_speech_input("fr_fr", &[1; 40]).unwrap();
        assert_eq!(s.ids.len(), 20);
        assert_eq!(v.text.detokenize(s.prefix()), "[French Speech]");
    }

    #[test]
    fn vocab_file_round_trip() {
        let corpus = vec!["[French Text] le chat".to_string(); 4];
        let v = Vocab::new(TextVocab::train_subword(&corpus, 10), 64, 128);
        let back = Vocab::from_file(&v.to_file()).unwrap();
        assert_eq!(back, v);
        let mut bad = v.to_file();
        bad.t += 1;
        assert!(Vocab::from_file(&bad).is_err());
    }
}
