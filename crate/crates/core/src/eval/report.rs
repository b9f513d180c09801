//! Evaluation reports: JSON, a CSV grouped by language family, and a
//! per-language TSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Task;
use crate::error::Result;
use crate::fsutil;
use crate::vocab::lang;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageResult {
    pub language: String,
    pub name: String,
    pub group: String,
    pub count: usize,
    pub candidates: usize,
    pub r_at_1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
}

/// Unweighted means over languages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub languages: usize,
    pub count: usize,
    pub r_at_1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub manifest: String,
    pub step: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub aggregate: Aggregate,
    pub per_language: Vec<LanguageResult>,
    pub provenance: Provenance,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_opt(rows: &[&LanguageResult], f: impl Fn(&LanguageResult) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = rows.iter().map(|r| f(r)).collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
}

pub fn aggregate(rows: &[&LanguageResult]) -> Aggregate {
    Aggregate {
        languages: rows.len(),
        count: rows.iter().map(|r| r.count).sum(),
        r_at_1: mean(rows.iter().map(|r| r.r_at_1)),
        wer: mean_opt(rows, |r| r.wer),
        bleu: mean_opt(rows, |r| r.bleu),
    }
}

/// Display name and family for a language code; unknown codes keep the
/// code as their name.
pub fn describe(code: &str) -> (String, String) {
    match lang::lookup(code) {
        Ok(l) => (l.name.to_string(), l.group.to_string()),
        Err(_) => (code.to_string(), "Other".to_string()),
    }
}

impl EvalReport {
    pub fn new(task: Task, mut per_language: Vec<LanguageResult>, provenance: Provenance) -> Self {
        per_language.sort_by(|a, b| a.language.cmp(&b.language));
        let rows: Vec<&LanguageResult> = per_language.iter().collect();
        Self {
            task,
            aggregate: aggregate(&rows),
            per_language,
            provenance,
        }
    }

    /// One row per language family plus an "All" row, each an unweighted
    /// mean over its languages.
    pub fn group_csv(&self) -> String {
        let mut groups: BTreeMap<&str, Vec<&LanguageResult>> = BTreeMap::new();
        for r in &self.per_language {
            groups.entry(r.group.as_str()).or_default().push(r);
        }
        let mut out = String::from("group,languages,count,r_at_1,wer,bleu\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let all: Vec<&LanguageResult> = self.per_language.iter().collect();
        for (name, rows) in groups.iter().map(|(k, v)| (*k, v)).chain([("All", &all)]) {
            let a = aggregate(rows);
            let _ = writeln!(
                out,
                "{name},{},{},{:.4},{},{}",
                a.languages,
                a.count,
                a.r_at_1,
                fmt(a.wer),
                fmt(a.bleu)
            );
        }
        out
    }

    pub fn language_tsv(&self) -> String {
        let mut out = String::from("language\tname\tgroup\tcount\tcandidates\tr_at_1\twer\tbleu\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.per_language {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.6}\t{}\t{}",
                r.language,
                r.name,
                r.group,
                r.count,
                r.candidates,
                r.r_at_1,
                fmt(r.wer),
                fmt(r.bleu)
            );
        }
        out
    }

    /// Human-readable summary line.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} aggregate R@1 {:.3} over {} languages ({} queries)",
            self.task.name(),
            self.aggregate.r_at_1,
            self.aggregate.languages,
            self.aggregate.count
        );
        if let Some(w) = self.aggregate.wer {
            let _ = write!(s, ", WER {:.2}%", 100.0 * w);
        }
        if let Some(b) = self.aggregate.bleu {
            let _ = write!(s, ", BLEU {b:.2}");
        }
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fsutil::read(path)?)?)
    }

    /// Write `<stem>.json`, `<stem>.groups.csv` and `<stem>.languages.tsv`.
    pub fn save_all(&self, dir: &Path, stem: &str) -> Result<()> {
        self.save_json(&dir.join(format!("{stem}.json")))?;
        fsutil::write_atomic(&dir.join(format!("{stem}.groups.csv")), self.group_csv().as_bytes())?;
        fsutil::write_atomic(&dir.join(format!("{stem}.languages.tsv")), self.language_tsv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(code: &str, count: usize, r: f64, wer: f64) -> LanguageResult {
        let (name, group) = describe(code);
        LanguageResult {
            language: code.into(),
            name,
            group,
            count,
            candidates: count,
            r_at_1: r,
            wer: Some(wer),
            bleu: None,
        }
    }

    #[test]
    fn aggregates_are_unweighted_means() {
        let rep = EvalReport::new(
            Task::S2T,
            vec![row("fr_fr", 100, 1.0, 0.0), row("fi_fi", 10, 0.5, 0.2)],
            Provenance::default(),
        );
        assert_eq!(rep.aggregate.r_at_1, 0.75);
        assert!((rep.aggregate.wer.unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(rep.aggregate.bleu, None);
        assert_eq!(rep.aggregate.count, 110);
        assert_eq!(rep.per_language[0].language, "fi_fi");
        let csv = rep.group_csv();
        assert!(csv.contains("Indo-European,1,100,1.0000,0.0000,"));
        assert!(csv.contains("Uralic,1,10,0.5000,0.2000,"));
        assert!(csv.contains("All,2,110,0.7500,0.1000,"));
        assert_eq!(rep.language_tsv().lines().count(), 3);
    }

    #[test]
    fn json_round_trip() {
        let rep = EvalReport::new(Task::S2TT, vec![row("de_de", 3, 1.0, 0.0)], Provenance::default());
        let dir = tempfile::tempdir().unwrap();
        rep.save_all(dir.path(), "r").unwrap();
        assert_eq!(EvalReport::load_json(&dir.path().join("r.json")).unwrap(), rep);
        assert!(dir.path().join("r.groups.csv").exists());
    }
}
