//! Frame files.
//!
//! | offset | bytes         | content                        |
//! |--------|---------------|--------------------------------|
//! | 0      | 4             | magic `FRM1`                   |
//! | 4      | 4             | dim, u32 little-endian         |
//! | 8      | 4             | frame rate in Hz, f32 LE       |
//! | 12     | 4             | frame count, u32 LE            |
//! | 16     | count·dim·4   | frames, row-major f32 LE       |
//!
//! Files whose length differs from `16 + count·dim·4` are rejected.

use std::path::Path;

use crate::audio::FrameSequence;
use crate::error::{Error, Result};
use crate::fsutil;

const MAGIC: &[u8; 4] = b"FRM1";
pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFile {
    pub dim: usize,
    pub frame_rate_hz: f32,
    /// count × dim values.
    pub frames: Vec<f32>,
}

impl FrameFile {
    pub fn count(&self) -> usize {
        self.frames.len() / self.dim.max(1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.frames.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.frame_rate_hz.to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend(fsutil::f32_le_bytes(self.frames.iter().copied()));
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        if bytes.len() < FRAME_HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Integrity(format!("{what}: not a frame file")));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let dim = u32::from_le_bytes(word(4)) as usize;
        let frame_rate_hz = f32::from_le_bytes(word(8));
        let count = u32::from_le_bytes(word(12)) as usize;
        let expected = FRAME_HEADER_LEN + count * dim * 4;
        if bytes.len() != expected {
            return Err(Error::Integrity(format!(
                "{what}: header declares {count}x{dim} frames ({expected} bytes) but file has {} bytes",
                bytes.len()
            )));
        }
        if dim == 0 {
            return Err(Error::Integrity(format!("{what}: zero frame dimension")));
        }
        Ok(Self {
            dim,
            frame_rate_hz,
            frames: fsutil::f32_from_le(&bytes[FRAME_HEADER_LEN..]),
        })
    }

    pub fn into_sequence(self, source_id: &str, language: &str) -> Result<FrameSequence> {
        FrameSequence::new(self.frames, self.dim, source_id, language)
    }
}

pub fn write_frames(path: &Path, f: &FrameFile) -> Result<()> {
    fsutil::write_atomic(path, &f.to_bytes())
}

pub fn read_frames(path: &Path) -> Result<FrameFile> {
    FrameFile::from_bytes(&fsutil::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrameFile {
        FrameFile {
            dim: 3,
            frame_rate_hz: 25.0,
            frames: (0..12).map(|i| i as f32 * 0.5 - 1.0).collect(),
        }
    }

    #[test]
    fn byte_layout() {
        let b = sample().to_bytes();
        assert_eq!(b.len(), 16 + 12 * 4);
        assert_eq!(&b[..4], b"FRM1");
        assert_eq!(&b[4..8], &3u32.to_le_bytes());
        assert_eq!(&b[8..12], &25f32.to_le_bytes());
        assert_eq!(&b[12..16], &4u32.to_le_bytes());
        assert_eq!(&b[16..20], &(-1f32).to_le_bytes());
    }

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.frm");
        write_frames(&path, &sample()).unwrap();
        assert_eq!(read_frames(&path).unwrap(), sample());
        let bytes = sample().to_bytes();
        for cut in [0, 10, 16, bytes.len() - 1] {
            assert!(matches!(
                FrameFile::from_bytes(&bytes[..cut], "x"),
                Err(Error::Integrity(_))
            ));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(FrameFile::from_bytes(&long, "x").is_err());
    }
}
