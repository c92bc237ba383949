use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    /// Hash over stage parameters and input file contents.
    pub input_hash: String,
    pub inputs: BTreeMap<String, String>,
    /// Workdir-relative path to content hash.
    pub outputs: BTreeMap<String, String>,
    pub seed: u64,
    pub started: String,
    pub finished: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn load_or_new(workdir: &Path, config: serde_json::Value, seed: u64) -> Result<Self, CliError> {
        let config_hash = sha256_bytes(config.to_string().as_bytes());
        let path = workdir.join(MANIFEST_FILE);
        let mut m = if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("corrupt manifest {}: {e}", path.display())))?
        } else {
            RunManifest {
                config: config.clone(),
                config_hash: config_hash.clone(),
                seed,
                stages: BTreeMap::new(),
            }
        };
        m.config = config;
        m.config_hash = config_hash;
        m.seed = seed;
        Ok(m)
    }

    pub fn save(&self, workdir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(workdir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(workdir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// True when `stage` completed with the same input hash and every recorded
    /// output is still on disk unchanged.
    pub fn is_current(&self, workdir: &Path, stage: &str, input_hash: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.status == StageStatus::Complete
            && rec.input_hash == input_hash
            && rec
                .outputs
                .iter()
                .all(|(p, h)| sha256_file(&workdir.join(p)).is_ok_and(|got| &got == h))
    }

    /// Paths of every artifact listed by any stage.
    pub fn artifacts(&self) -> Vec<PathBuf> {
        let mut out: Vec<PathBuf> = self
            .stages
            .values()
            .flat_map(|s| s.outputs.keys().map(PathBuf::from))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// Bookkeeping for one stage run.
pub struct Stage {
    pub name: String,
    pub input_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    started: String,
}

impl Stage {
    /// `params` is any serializable description of the stage's settings.
    pub fn new(name: impl Into<String>, params: &impl Serialize, inputs: &[PathBuf], seed: u64) -> Result<Self, CliError> {
        let mut hasher = Sha256::new();
        let params = serde_json::to_string(params)?;
        hasher.update(params.as_bytes());
        let mut map = BTreeMap::new();
        for p in inputs {
            let h = sha256_file(p)?;
            hasher.update(p.to_string_lossy().as_bytes());
            hasher.update(h.as_bytes());
            map.insert(p.to_string_lossy().into_owned(), h);
        }
        Ok(Stage {
            name: name.into(),
            input_hash: hex::encode(hasher.finalize()),
            inputs: map,
            seed,
            started: now(),
        })
    }

    pub fn finish(self, manifest: &mut RunManifest, workdir: &Path, outputs: &[PathBuf]) -> Result<(), CliError> {
        let mut map = BTreeMap::new();
        for p in outputs {
            let rel = p.strip_prefix(workdir).unwrap_or(p);
            map.insert(rel.to_string_lossy().into_owned(), sha256_file(p)?);
        }
        manifest.stages.insert(
            self.name,
            StageRecord {
                status: StageStatus::Complete,
                input_hash: self.input_hash,
                inputs: self.inputs,
                outputs: map,
                seed: self.seed,
                started: self.started,
                finished: Some(now()),
            },
        );
        manifest.save(workdir)
    }

    pub fn fail(self, manifest: &mut RunManifest, workdir: &Path) -> Result<(), CliError> {
        manifest.stages.insert(
            self.name,
            StageRecord {
                status: StageStatus::Failed,
                input_hash: self.input_hash,
                inputs: self.inputs,
                outputs: BTreeMap::new(),
                seed: self.seed,
                started: self.started,
                finished: Some(now()),
            },
        );
        manifest.save(workdir)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn stage_currency() {
        let dir = tempfile::tempdir().unwrap();
        let wd = dir.path();
        let input = wd.join("in.txt");
        std::fs::write(&input, "x").unwrap();
        let out = wd.join("out.txt");
        std::fs::write(&out, "y").unwrap();
        let mut m = RunManifest::load_or_new(wd, serde_json::json!({}), 1).unwrap();
        let st = Stage::new("s", &1, &[input.clone()], 1).unwrap();
        let h = st.input_hash.clone();
        st.finish(&mut m, wd, &[out.clone()]).unwrap();
        assert!(m.is_current(wd, "s", &h));
        assert_eq!(m.artifacts(), vec![PathBuf::from("out.txt")]);

        let reloaded = RunManifest::load_or_new(wd, serde_json::json!({}), 1).unwrap();
        assert!(reloaded.is_current(wd, "s", &h));
        std::fs::write(&out, "z").unwrap();
        assert!(!reloaded.is_current(wd, "s", &h));
        let other = Stage::new("s", &2, &[input], 1).unwrap();
        assert_ne!(other.input_hash, h);
    }
}
