//! Run manifests: what a stage read, what it wrote and how it was configured.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;
pub const BUILD_ID: &str = env!("HANDMAP_BUILD_ID");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: String,
    pub build: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Role (`episodes`, `checkpoint`, `index`, ...) to input path.
    pub inputs: BTreeMap<String, InputFile>,
    /// Output file name to digest.
    pub outputs: BTreeMap<String, String>,
    pub wall_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest of a file, or of every file in a directory in name order.
pub fn sha256_path(path: &Path) -> Result<String> {
    if !path.is_dir() {
        return sha256_file(path);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    names.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE));
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap_or_default().to_string_lossy().as_bytes());
        h.update(sha256_file(&p)?.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading manifest {}", path.display()))?;
        let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if m.format_version != MANIFEST_FORMAT {
            bail!("manifest {} has format_version {}, expected {MANIFEST_FORMAT}", path.display(), m.format_version);
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    /// Fails if any recorded input no longer has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for (role, f) in &self.inputs {
            let now = sha256_path(&f.path).with_context(|| format!("{role} input {}", f.path.display()))?;
            if now != f.sha256 {
                bail!("{role} input {} changed since the manifest was written", f.path.display());
            }
        }
        Ok(())
    }
}
