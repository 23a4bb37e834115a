use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::jsonl::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageEntry {
    pub status: StageStatus,
    /// Input path relative to the workdir (or absolute) and its sha256.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub count_in: usize,
    #[serde(default)]
    pub count_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageEntry {
    pub fn running() -> Self {
        Self {
            status: StageStatus::Running,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            count_in: 0,
            count_out: 0,
            error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub created: String,
    pub stages: BTreeMap<String, StageEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn new(created: impl Into<String>) -> Self {
        Self {
            created: created.into(),
            stages: BTreeMap::new(),
        }
    }

    pub fn load(workdir: &Path) -> Result<Option<Self>, String> {
        let path = workdir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn save(&self, workdir: &Path) -> Result<(), String> {
        let mut body = serde_json::to_vec_pretty(self).map_err(|e| e.to_string())?;
        body.push(b'\n');
        write_atomic(&workdir.join(MANIFEST_FILE), &body).map_err(|e| e.to_string())
    }

    pub fn status(&self, stage: &str) -> StageStatus {
        self.stages.get(stage).map_or(StageStatus::Pending, |e| e.status)
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.status(stage) == StageStatus::Done
    }
}

pub fn sha256_file(path: &Path) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Key used for a path in the manifest: relative to the workdir when possible.
pub fn manifest_key(workdir: &Path, path: &Path) -> String {
    path.strip_prefix(workdir)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn resolve_key(workdir: &Path, key: &str) -> PathBuf {
    let p = Path::new(key);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

/// Paths whose current checksum differs from the recorded one.
pub fn changed_files(workdir: &Path, recorded: &BTreeMap<String, String>) -> Vec<String> {
    recorded
        .iter()
        .filter(|(k, sum)| sha256_file(&resolve_key(workdir, k)).ok().as_ref() != Some(*sum))
        .map(|(k, _)| k.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("a.txt");
        std::fs::write(&file, "x").unwrap();
        let mut m = Manifest::new("t0");
        let mut e = StageEntry::running();
        e.status = StageStatus::Done;
        e.outputs.insert(manifest_key(dir.path(), &file), sha256_file(&file).unwrap());
        m.stages.insert("ingest".into(), e);
        m.save(dir.path()).unwrap();
        let back = Manifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.is_done("ingest"));
        assert_eq!(back.status("score"), StageStatus::Pending);
        assert!(changed_files(dir.path(), &back.stages["ingest"].outputs).is_empty());
        std::fs::write(&file, "y").unwrap();
        assert_eq!(changed_files(dir.path(), &back.stages["ingest"].outputs), ["a.txt"]);
    }
}
