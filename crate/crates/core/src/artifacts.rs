//! Run-directory layout, per-stage manifests and the timing log.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// What a stage consumed and produced, keyed by path relative to the run
/// directory (absolute for inputs outside it).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config_path(&self) -> PathBuf {
        self.path("config.conf")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path("metrics.json")
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.path(&format!("manifests/{stage}.json"))
    }

    pub fn read_manifest(&self, stage: &str) -> Option<Manifest> {
        let text = fs::read_to_string(self.manifest_path(stage)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Hash every file under the given entries. Relative entries resolve
    /// against the run directory; directories are walked recursively.
    pub fn hash_entries(&self, entries: &[String]) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        for e in entries {
            let p = if Path::new(e).is_absolute() { PathBuf::from(e) } else { self.path(e) };
            if p.is_dir() {
                let mut files = Vec::new();
                walk(&p, &mut files)?;
                for f in files {
                    out.insert(self.display_key(&f), sha256_file(&f)?);
                }
            } else if p.is_file() {
                out.insert(self.display_key(&p), sha256_file(&p)?);
            } else {
                out.insert(self.display_key(&p), "missing".into());
            }
        }
        Ok(out)
    }

    fn display_key(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .map(|r| r.to_string_lossy().replace('\\', "/"))
            .unwrap_or_else(|_| p.to_string_lossy().into_owned())
    }

    /// True when the stage's manifest matches the current inputs and
    /// config hash and its recorded outputs are still intact.
    pub fn is_fresh(&self, stage: &str, inputs: &[String], outputs: &[String], config_hash: &str) -> Result<bool> {
        let Some(m) = self.read_manifest(stage) else {
            return Ok(false);
        };
        if m.config_hash != config_hash || m.outputs.is_empty() {
            return Ok(false);
        }
        if m.inputs.values().any(|h| h == "missing") || self.hash_entries(inputs)? != m.inputs {
            return Ok(false);
        }
        Ok(self.hash_entries(outputs)? == m.outputs)
    }

    pub fn write_manifest(&self, stage: &str, inputs: &[String], outputs: &[String], config_hash: &str) -> Result<Manifest> {
        let m = Manifest {
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            inputs: self.hash_entries(inputs)?,
            outputs: self.hash_entries(outputs)?,
        };
        let path = self.manifest_path(stage);
        fs::create_dir_all(path.parent().expect("manifest dir"))?;
        fs::write(path, serde_json::to_string_pretty(&m)?)?;
        Ok(m)
    }

    pub fn invalidate(&self, stage: &str) -> Result<()> {
        let p = self.manifest_path(stage);
        if p.exists() {
            fs::remove_file(p)?;
        }
        Ok(())
    }

    /// Append `stage<TAB>status<TAB>seconds` to `timing.log`.
    pub fn log_timing(&self, stage: &str, status: &str, seconds: f64) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path("timing.log"))?;
        writeln!(f, "{stage}\t{status}\t{seconds:.3}")?;
        Ok(())
    }

    pub fn write_json<S: Serialize>(&self, rel: &str, value: &S) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(p, text)?;
        Ok(())
    }

    pub fn read_json<D: serde::de::DeserializeOwned>(&self, rel: &str) -> Result<D> {
        Ok(serde_json::from_str(&fs::read_to_string(self.path(rel))?)?)
    }

    /// Remove and recreate a stage output directory.
    pub fn reset_dir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            fs::remove_dir_all(&p)?;
        }
        fs::create_dir_all(&p)?;
        Ok(p)
    }
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}
