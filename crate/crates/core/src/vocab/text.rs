//! Byte-level text vocabulary with an optional trained byte-pair-encoding
//! (subword) layer.
//!
//! Id layout: `0..256` raw bytes, then the special tokens in
//! [`SPECIAL_TOKENS`] order, then one id per learned merge in rank order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 256;
pub const UNK: u32 = 257;
pub const PREFIX_OPEN: u32 = 258;
pub const PREFIX_CLOSE: u32 = 259;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "[", "]"];
const FIRST_MERGE: u32 = 260;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    #[default]
    Byte,
    Subword,
}

#[derive(Debug, Clone)]
pub struct TextVocab {
    mode: VocabMode,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    expansions: Vec<Vec<u8>>,
}

impl PartialEq for TextVocab {
    fn eq(&self, other: &Self) -> bool {
        self.mode == other.mode && self.merges == other.merges
    }
}

/// One pre-tokenized piece of input.
enum Piece<'a> {
    Special(u32),
    Chunk(&'a [u8]),
}

/// Split on prefix brackets, then into chunks that start at a space
/// following a non-space ("Hello World ." → "Hello", " World", " .").
fn pieces<'a>(s: &'a str) -> Vec<Piece<'a>> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    let flush = |out: &mut Vec<Piece<'a>>, from: usize, to: usize| {
        if to > from {
            out.push(Piece::Chunk(&bytes[from..to]));
        }
    };
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'[' | b']' => {
                flush(&mut out, start, i);
                out.push(Piece::Special(if b == b'[' {
                    PREFIX_OPEN
                } else {
                    PREFIX_CLOSE
                }));
                start = i + 1;
            }
            b' ' if i > start && bytes[i - 1] != b' ' => {
                flush(&mut out, start, i);
                start = i;
            }
            _ => {}
        }
    }
    flush(&mut out, start, bytes.len());
    out
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl TextVocab {
    pub fn byte_level() -> Self {
        Self::from_merges(VocabMode::Byte, Vec::new()).expect("no merges")
    }

    /// Rebuild a vocabulary from an ordered merge list.
    pub fn from_merges(mode: VocabMode, merges: Vec<(u32, u32)>) -> crate::Result<Self> {
        if mode == VocabMode::Byte && !merges.is_empty() {
            return Err(crate::Error::Config(
                "byte vocabulary cannot carry merges".into(),
            ));
        }
        let mut expansions: Vec<Vec<u8>> = Vec::with_capacity(merges.len());
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let id = FIRST_MERGE + rank as u32;
            let expand = |x: u32, exps: &Vec<Vec<u8>>| -> crate::Result<Vec<u8>> {
                match x {
                    0..=255 => Ok(vec![x as u8]),
                    x if x >= FIRST_MERGE && x < id => {
                        Ok(exps[(x - FIRST_MERGE) as usize].clone())
                    }
                    _ => Err(crate::Error::Config(format!(
                        "merge {rank} references invalid id {x}"
                    ))),
                }
            };
            let mut bytes = expand(l, &expansions)?;
            bytes.extend(expand(r, &expansions)?);
            expansions.push(bytes);
            ranks.insert((l, r), rank as u32);
        }
        Ok(Self {
            mode,
            merges,
            ranks,
            expansions,
        })
    }

    /// Learn up to `num_merges` byte-pair merges from `corpus`. A pair must
    /// occur at least twice to be merged; ties go to the smallest pair.
    pub fn train_subword(corpus: &[String], num_merges: usize) -> Self {
        let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
        for s in corpus {
            for piece in pieces(s) {
                if let Piece::Chunk(c) = piece {
                    *counts.entry(c.iter().map(|&b| b as u32).collect()).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(Vec<u32>, usize)> = counts.into_iter().collect();
        words.sort();
        let mut merges = Vec::new();
        for rank in 0..num_merges {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some((pair, _)) = best else { break };
            let id = FIRST_MERGE + rank as u32;
            for (w, _) in &mut words {
                *w = apply_merge(w, pair, id);
            }
            merges.push(pair);
        }
        Self::from_merges(VocabMode::Subword, merges).expect("merges are well formed")
    }

    pub fn mode(&self) -> VocabMode {
        self.mode
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Text vocabulary size t.
    pub fn size(&self) -> usize {
        FIRST_MERGE as usize + self.merges.len()
    }

    pub fn tokenize(&self, s: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for piece in pieces(s) {
            match piece {
                Piece::Special(id) => out.push(id as usize),
                Piece::Chunk(c) => {
                    let mut ids: Vec<u32> = c.iter().map(|&b| b as u32).collect();
                    if !self.merges.is_empty() {
                        self.merge_chunk(&mut ids);
                    }
                    out.extend(ids.into_iter().map(|i| i as usize));
                }
            }
        }
        out
    }

    fn merge_chunk(&self, ids: &mut Vec<u32>) {
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            *ids = apply_merge(ids, pair, FIRST_MERGE + rank);
        }
    }

    /// Inverse of [`tokenize`](Self::tokenize). Pad and unknown ids render
    /// as nothing and U+FFFD respectively; ids ≥ t are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match id as u32 {
                b @ 0..=255 => bytes.push(b as u8),
                PAD => {}
                UNK => bytes.extend("\u{fffd}".as_bytes()),
                PREFIX_OPEN => bytes.push(b'['),
                PREFIX_CLOSE => bytes.push(b']'),
                x if (x as usize) < self.size() => {
                    bytes.extend(&self.expansions[(x - FIRST_MERGE) as usize])
                }
                _ => {}
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

fn apply_merge(w: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && (w[i], w[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    out
}
