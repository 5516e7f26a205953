use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PreprocessMode;
use crate::corrupt::CorruptionRecord;
use crate::error::{Error, Result};

pub const NORMAL_CLASS: &str = "normal";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionRecord>,
    /// Split name, such as `train` or `test`.
    #[serde(default)]
    pub split: String,
}

/// Index of a generated or corrupted dataset. Paths are relative to the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub preprocessing: Option<PreprocessMode>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(seed: u64, preprocessing: Option<PreprocessMode>) -> Self {
        DatasetManifest {
            schema_version: 1,
            seed,
            preprocessing,
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.volume.as_str()) {
                return Err(Error::invalid(format!("duplicate volume path {}", e.volume)));
            }
            if let Some(m) = &e.mask {
                if !seen.insert(m.as_str()) {
                    return Err(Error::invalid(format!("duplicate mask path {m}")));
                }
            }
            if e.corruption.is_none() && e.class != NORMAL_CLASS {
                return Err(Error::invalid(format!(
                    "uncorrupted entry {} has class {} instead of {NORMAL_CLASS}",
                    e.id, e.class
                )));
            }
        }
        Ok(())
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == name)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, class: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            volume: format!("{id}.vol3"),
            mask: None,
            class: class.into(),
            corruption: None,
            split: "train".into(),
        }
    }

    #[test]
    fn validation_rules() {
        let mut m = DatasetManifest::new(0, None);
        m.entries.push(entry("a", NORMAL_CLASS));
        assert!(m.validate().is_ok());
        m.entries.push(entry("a", NORMAL_CLASS));
        assert!(m.validate().is_err());
        m.entries[1] = entry("b", "flip_lr");
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let mut m = DatasetManifest::new(3, Some(PreprocessMode::ClampRescale { lo: -15.0, hi: 100.0 }));
        m.entries.push(entry("x", NORMAL_CLASS));
        m.write(&p).unwrap();
        assert_eq!(DatasetManifest::read(&p).unwrap(), m);
    }
}
