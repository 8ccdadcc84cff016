use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ehr_frailty::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Written as `run_manifest.json` by every command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub versions: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let hash = Sha256::digest(&bytes);
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
        bytes: bytes.len() as u64,
    })
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let versions = [
            ("ehrfrail".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("format".to_string(), "1".to_string()),
        ]
        .into_iter()
        .collect();
        RunManifest {
            command: command.to_string(),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions,
            timings: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            return Ok(());
        }
        let d = digest(path)?;
        if !self.inputs.iter().any(|x| x.path == d.path) {
            self.inputs.push(d);
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let d = digest(path)?;
        self.outputs.retain(|x| x.path != d.path);
        self.outputs.push(d);
        Ok(())
    }

    pub fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let path = dir.join("run_manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
