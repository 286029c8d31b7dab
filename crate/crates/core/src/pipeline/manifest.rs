// SPDX-License-Identifier: MIT OR Apache-2.0

//! The record of what each stage wrote.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::hex;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRef {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub config_hash: String,
    pub outputs: Vec<ArtifactRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

impl ArtifactManifest {
    pub fn new(config_hash: String) -> Self {
        ArtifactManifest {
            config_hash,
            stages: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = Self::path(dir);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    /// Loads and checks that every referenced file exists with its hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::path(dir);
        let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: ArtifactManifest = serde_json::from_str(&s)?;
        m.verify(dir)?;
        Ok(m)
    }

    pub fn verify(&self, dir: &Path) -> Result<()> {
        for rec in self.stages.values() {
            if rec.config_hash != self.config_hash {
                return Err(Error::ConfigHashMismatch {
                    path: Self::path(dir),
                    expected: self.config_hash.clone(),
                    found: rec.config_hash.clone(),
                });
            }
            for a in &rec.outputs {
                let f = dir.join(&a.path);
                if !f.is_file() || sha256_file(&f)? != a.sha256 {
                    return Err(Error::ArtifactHashMismatch(f));
                }
            }
        }
        Ok(())
    }

    /// Forgets stages whose outputs were deleted, so they count as not run.
    pub fn drop_incomplete(&mut self, dir: &Path) {
        self.stages
            .retain(|_, rec| rec.outputs.iter().all(|a| dir.join(&a.path).is_file()));
    }

    pub fn has(&self, stage: &str) -> bool {
        self.stages.contains_key(stage)
    }

    /// Hashes `paths` and records them as the outputs of `stage`.
    pub fn record(&mut self, dir: &Path, stage: &str, paths: &[PathBuf]) -> Result<()> {
        let mut outputs = Vec::with_capacity(paths.len());
        for p in paths {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            outputs.push(ArtifactRef {
                sha256: sha256_file(p)?,
                path: rel,
            });
        }
        outputs.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                stage: stage.to_string(),
                config_hash: self.config_hash.clone(),
                outputs,
            },
        );
        Ok(())
    }
}
