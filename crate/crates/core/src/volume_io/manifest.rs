use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// List of cases on disk plus their train/eval assignment. On disk this is a
/// JSON array of `{case_id, image, label?, split?}` records; relative paths
/// resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.case_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate case_id '{}'", e.case_id)));
            }
            if e.split == Some(Split::Eval) && e.label.is_none() {
                return Err(Error::Manifest(format!("eval case '{}' has no label", e.case_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut entries {
            if e.image.is_relative() {
                e.image = base.join(&e.image);
            }
            if let Some(l) = e.label.as_mut() {
                if l.is_relative() {
                    *l = base.join(&*l);
                }
            }
        }
        Self::new(entries)
    }

    /// Paths under the manifest's directory are stored relative to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let entries: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| ManifestEntry {
                image: rel(&e.image),
                label: e.label.as_deref().map(rel),
                ..e.clone()
            })
            .collect();
        let text = serde_json::to_string_pretty(&entries)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn labeled(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.label.is_some())
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }
}

/// Seeded random train/eval split over the labeled cases. Unlabeled cases
/// are left unassigned. The result depends only on the set of labeled case
/// ids, `n_train` and `seed`.
pub fn split_dataset(manifest: &DatasetManifest, n_train: usize, seed: u64) -> Result<DatasetManifest> {
    let mut labeled: Vec<&str> = manifest.labeled().map(|e| e.case_id.as_str()).collect();
    if n_train == 0 || n_train >= labeled.len() {
        return Err(Error::InvalidArgument(format!(
            "n_train = {n_train} must be in 1..{} (number of labeled cases)",
            labeled.len()
        )));
    }
    labeled.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labeled.shuffle(&mut rng);
    let train: HashSet<&str> = labeled[..n_train].iter().copied().collect();

    let entries = manifest
        .entries
        .iter()
        .map(|e| {
            let split = e.label.as_ref().map(|_| {
                if train.contains(e.case_id.as_str()) {
                    Split::Train
                } else {
                    Split::Eval
                }
            });
            ManifestEntry { split, ..e.clone() }
        })
        .collect();
    DatasetManifest::new(entries)
}
