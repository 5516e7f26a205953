//! Run manifest: resolved config, content hashes and per-stage records.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seconds: f64,
    /// Input path (relative to the run directory) to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub config_sha256: String,
    /// Completed stages in completion order.
    pub order: Vec<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::MissingInput(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Write through a temporary file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        RunManifest {
            schema_version: 1,
            config: config.clone(),
            config_sha256: config_hash(config),
            order: Vec::new(),
            stages: BTreeMap::new(),
        }
    }

    /// Existing manifest for `config` under `dir`, or a fresh one when
    /// absent or written for a different config.
    pub fn open(dir: &Path, config: &RunConfig) -> CliResult<Self> {
        let p = dir.join(MANIFEST_FILE);
        if let Ok(bytes) = fs::read(&p) {
            if let Ok(m) = serde_json::from_slice::<RunManifest>(&bytes) {
                if m.config_sha256 == config_hash(config) {
                    return Ok(m);
                }
            }
        }
        Ok(Self::new(config))
    }

    /// A stage is done when it was recorded and every artifact still hashes
    /// to the recorded value.
    pub fn is_done(&self, dir: &Path, stage: &str) -> bool {
        match self.stages.get(stage) {
            Some(r) => r
                .artifacts
                .iter()
                .all(|(p, h)| sha256_file(&dir.join(p)).map(|x| &x == h).unwrap_or(false)),
            None => false,
        }
    }

    pub fn record(&mut self, dir: &Path, stage: &str, seconds: f64, inputs: &[PathBuf], artifacts: &[PathBuf]) -> CliResult<()> {
        let hash_all = |paths: &[PathBuf]| -> CliResult<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| {
                    let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
                    Ok((rel, sha256_file(p)?))
                })
                .collect()
        };
        let rec = StageRecord {
            seconds,
            inputs: hash_all(inputs)?,
            artifacts: hash_all(artifacts)?,
        };
        self.order.retain(|s| s != stage);
        self.order.push(stage.to_string());
        self.stages.insert(stage.to_string(), rec);
        self.save(dir)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(&dir.join(MANIFEST_FILE), &bytes)
    }

    pub fn artifact_paths(&self, dir: &Path, stage: &str) -> Vec<PathBuf> {
        self.stages
            .get(stage)
            .map(|r| r.artifacts.keys().map(|p| dir.join(p)).collect())
            .unwrap_or_default()
    }
}

pub fn config_hash(config: &RunConfig) -> String {
    sha256_bytes(&serde_json::to_vec(config).expect("config serializes"))
}
