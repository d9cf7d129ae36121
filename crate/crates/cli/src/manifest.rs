//! Record of an experiment directory: what ran, with which seeds, and which
//! files it produced. Completed cells are skipped when a run is resumed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::error::UsageError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSeed {
    pub repetition: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CellRecord {
    /// Paths relative to the output directory.
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<RepetitionSeed>,
    pub cells: BTreeMap<String, CellRecord>,
    /// Every file written, cells and summaries alike.
    pub files: BTreeSet<String>,
    pub started_at: String,
    pub updated_at: String,
}

fn now() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

/// A manifest bound to its directory.
#[derive(Debug)]
pub struct Manifest {
    dir: PathBuf,
    pub data: RunManifest,
}

impl Manifest {
    /// Load the manifest in `dir` if it belongs to the same command and
    /// configuration; otherwise start a new one. `fresh` discards any
    /// previous record.
    pub fn open(
        dir: &Path,
        command: &str,
        config_hash: &str,
        seeds: Vec<RepetitionSeed>,
        fresh: bool,
    ) -> anyhow::Result<Manifest> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        if path.exists() && !fresh {
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let data: RunManifest =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if data.command != command || data.config_hash != config_hash {
                return Err(UsageError(format!(
                    "{} belongs to a different `{}` run (config {}); pass --fresh or choose another output directory",
                    path.display(),
                    data.command,
                    data.config_hash
                ))
                .into());
            }
            return Ok(Manifest { dir: dir.to_path_buf(), data });
        }
        let stamp = now();
        Ok(Manifest {
            dir: dir.to_path_buf(),
            data: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                config_hash: config_hash.to_string(),
                seeds,
                cells: BTreeMap::new(),
                files: BTreeSet::new(),
                started_at: stamp.clone(),
                updated_at: stamp,
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// A cell counts as done only while all of its files still exist.
    pub fn is_complete(&self, cell: &str) -> bool {
        self.data.cells.get(cell).is_some_and(|c| c.files.iter().all(|f| self.dir.join(f).exists()))
    }

    pub fn cell(&self, cell: &str) -> Option<&CellRecord> {
        self.data.cells.get(cell)
    }

    pub fn record(&mut self, cell: &str, record: CellRecord) -> anyhow::Result<()> {
        self.data.files.extend(record.files.iter().cloned());
        self.data.cells.insert(cell.to_string(), record);
        self.save()
    }

    pub fn add_file(&mut self, file: &str) -> anyhow::Result<()> {
        self.data.files.insert(file.to_string());
        self.save()
    }

    /// Write via a temporary file so an interrupted save never leaves a torn manifest.
    pub fn save(&mut self) -> anyhow::Result<()> {
        self.data.updated_at = now();
        let path = self.dir.join(MANIFEST_FILE);
        let tmp = self.dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(&self.data)? + "\n";
        fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resume_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let seeds = vec![RepetitionSeed { repetition: 0, seed: 7 }];
        let mut m = Manifest::open(dir.path(), "run", "abc", seeds.clone(), false).unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        m.record("first/rep0", CellRecord { files: vec!["a.txt".into()], checkpoint: None }).unwrap();
        m.record("first/rep1", CellRecord { files: vec!["missing.txt".into()], checkpoint: None }).unwrap();

        let m = Manifest::open(dir.path(), "run", "abc", seeds.clone(), false).unwrap();
        assert!(m.is_complete("first/rep0"));
        assert!(!m.is_complete("first/rep1"));
        assert!(m.data.files.contains("a.txt"));

        let err = Manifest::open(dir.path(), "run", "other", seeds.clone(), false).unwrap_err();
        assert!(err.to_string().contains("--fresh"));
        let m = Manifest::open(dir.path(), "run", "other", seeds, true).unwrap();
        assert!(m.data.cells.is_empty());
    }
}
