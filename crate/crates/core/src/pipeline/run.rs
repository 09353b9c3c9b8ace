//! Run directory layout and the stage manifest used for `--resume`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// `runs/<name>/{config.toml, dataset/, checkpoints/, metrics/, plots/, manifest.json}`.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["dataset", "checkpoints", "metrics", "plots"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint(&self, file: &str) -> PathBuf {
        self.root.join("checkpoints").join(file)
    }

    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join("metrics").join(file)
    }

    pub fn plots(&self, file: &str) -> PathBuf {
        self.root.join("plots").join(file)
    }

    /// `path` relative to the run root, with forward slashes.
    fn relative(&self, path: &Path) -> Result<String> {
        let rel = path.strip_prefix(&self.root).map_err(|_| {
            Error::Validation(format!("{} is outside the run directory", path.display()))
        })?;
        Ok(rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy())
            .collect::<Vec<_>>()
            .join("/"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Pretty JSON with a trailing newline. Output depends only on `value`.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash over the stage's configuration and input artifacts.
    pub input_hash: String,
    /// Output file (relative to the run root) to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(run: &RunDir) -> Result<Self> {
        let path = run.root().join(MANIFEST_FILE);
        if path.exists() {
            read_json(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, run: &RunDir) -> Result<()> {
        write_json(run.root().join(MANIFEST_FILE), self)
    }

    /// True when `stage` completed with the same inputs and its outputs are intact.
    pub fn is_complete(&self, run: &RunDir, stage: &str, input_hash: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.input_hash == input_hash
            && rec
                .outputs
                .iter()
                .all(|(rel, hash)| file_hash(run.root().join(rel)).is_ok_and(|h| &h == hash))
    }

    pub fn record(
        &mut self,
        run: &RunDir,
        stage: &str,
        input_hash: String,
        outputs: &[PathBuf],
    ) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for path in outputs {
            hashes.insert(run.relative(path)?, file_hash(path)?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                input_hash,
                outputs: hashes,
            },
        );
        Ok(())
    }

    pub fn output_hash(&self, stage: &str, rel: &str) -> Option<&str> {
        self.stages.get(stage)?.outputs.get(rel).map(String::as_str)
    }
}

/// Hash of a stage name, its configuration and its input files.
pub fn stage_input_hash<C: Serialize>(stage: &str, config: &C, inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(serde_json::to_vec(config)?);
    for path in inputs {
        h.update(file_hash(path)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_tracks_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path().join("r")).unwrap();
        let out = run.metrics("a.json");
        write_json(&out, &serde_json::json!({"x": 1.5})).unwrap();
        let mut m = Manifest::default();
        let hash = stage_input_hash("s", &1u32, &[]).unwrap();
        m.record(&run, "s", hash.clone(), std::slice::from_ref(&out))
            .unwrap();
        m.save(&run).unwrap();
        let m = Manifest::load(&run).unwrap();
        assert!(m.is_complete(&run, "s", &hash));
        assert!(!m.is_complete(&run, "s", "other"));
        assert!(m.output_hash("s", "metrics/a.json").is_some());
        fs::write(&out, "{}").unwrap();
        assert!(!m.is_complete(&run, "s", &hash));
    }
}
