//! JSON-lines manifests, one record per line:
//!
//! ```json
//! {"id":"fr-0001","language":"fr_fr","task":"S2T","frames_path":"frames/fr-0001.frm","transcript":"..."}
//! {"id":"mt-0001","language":"fr_fr","task":"MT","transcript":"...","translation":{"target_lang":"en_us","text":"..."}}
//! ```
//!
//! `frames_path` is relative to the manifest's directory unless absolute.
//! Blank lines are ignored.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::vocab::lang;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Translation {
    pub target_lang: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub language: String,
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<Translation>,
    /// Concept ids behind a synthetic sentence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub concepts: Option<Vec<usize>>,
}

impl ManifestRecord {
    fn check(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        lang::lookup(&self.language).map_err(|e| e.to_string())?;
        let need_frames = matches!(self.task, Task::S2T | Task::S2TT);
        let need_transcript = matches!(self.task, Task::S2T | Task::MT);
        let need_translation = matches!(self.task, Task::MT | Task::S2TT);
        let task = self.task.name();
        if need_frames && self.frames_path.is_none() {
            return Err(format!("{task} record {} has no frames_path", self.id));
        }
        if need_transcript && self.transcript.as_deref().is_none_or(str::is_empty) {
            return Err(format!("{task} record {} has no transcript", self.id));
        }
        if need_translation {
            match &self.translation {
                None => return Err(format!("{task} record {} has no translation", self.id)),
                Some(t) => {
                    lang::lookup(&t.target_lang).map_err(|e| e.to_string())?;
                    if t.text.is_empty() {
                        return Err(format!("{task} record {} has an empty translation", self.id));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = String::from_utf8(fsutil::read(path)?).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let fail = |m: String| Error::Validation(format!("{}:{line_no}: {m}", path.display()));
        rec.check().map_err(fail)?;
        if !ids.insert(rec.id.clone()) {
            return Err(fail(format!("duplicate id {:?}", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        out.extend(serde_json::to_vec(r)?);
        out.push(b'\n');
    }
    fsutil::write_atomic(path, &out)
}

/// Absolute location of a record's frame file.
pub fn resolve_frames(manifest: &Path, rec: &ManifestRecord) -> Result<PathBuf> {
    let rel = rec
        .frames_path
        .as_deref()
        .ok_or_else(|| Error::Data(format!("record {} has no frames_path", rec.id)))?;
    let p = Path::new(rel);
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    })
}
