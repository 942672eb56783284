//! Dataset manifest: which volumes exist, where their files live and, when
//! fixed in advance, which split they belong to.
//!
//! ```toml
//! dataset = "segthor"
//!
//! [[organs]]
//! label = 1
//! name = "esophagus"
//!
//! [[volumes]]
//! id = "Patient_01"
//! image = "Patient_01/Patient_01.nii.gz"
//! label = "Patient_01/GT.nii.gz"
//! split = "train"
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::splits::{make_splits, DatasetKind, SplitSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganSpec {
    pub label: u8,
    pub name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAssignment {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVolume {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitAssignment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset: DatasetKind,
    #[serde(default)]
    pub organs: Vec<OrganSpec>,
    pub volumes: Vec<ManifestVolume>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(dataset: DatasetKind, organs: Vec<OrganSpec>, volumes: Vec<ManifestVolume>) -> Self {
        Manifest { dataset, organs, volumes, root: PathBuf::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if m.organs.is_empty() {
            m.organs = m.dataset.default_organs();
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.volumes.iter().map(|v| v.id.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Manifest("duplicate volume id".into()));
        }
        if self.volumes.is_empty() {
            return Err(Error::Manifest("no volumes listed".into()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn volume(&self, id: &str) -> Result<&ManifestVolume> {
        self.volumes.iter().find(|v| v.id == id).ok_or_else(|| Error::UnknownVolume(id.to_string()))
    }

    pub fn ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.id.clone()).collect()
    }

    /// Uses the manifest's split column when every volume has one, otherwise
    /// a seeded split.
    pub fn splits(&self, seed: u64, fold_count: usize, fold_index: usize) -> Result<SplitSpec> {
        if self.volumes.iter().all(|v| v.split.is_some()) {
            let pick = |s| self.volumes.iter().filter(|v| v.split == Some(s)).map(|v| v.id.clone()).collect();
            SplitSpec::new(self.dataset, pick(SplitAssignment::Train), pick(SplitAssignment::Test), fold_count, fold_index)
        } else {
            make_splits(self.dataset, &self.ids(), seed, fold_count, fold_index)
        }
    }
}
