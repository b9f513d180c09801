//! Data ingestion: JSON-lines manifests, raw frame files, and the synthetic
//! multilingual corpus generator.

mod frames;
mod manifest;
pub mod synthetic;

use serde::{Deserialize, Serialize};

pub use frames::{read_frames, write_frames, FrameFile, FRAME_HEADER_LEN};
pub use manifest::{load_manifest, resolve_frames, write_manifest, ManifestRecord, Translation};
pub use synthetic::{generate, SyntheticCorpus, SyntheticSpec};

/// Dataset role of a record or training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    /// Speech paired with its transcript.
    S2T,
    /// Text paired with a translation.
    MT,
    /// Speech paired with a translation in another language.
    S2TT,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::S2T => "S2T",
            Task::MT => "MT",
            Task::S2TT => "S2TT",
        }
    }
}
