use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_idx, load_ppm_dir, synth_ood, DataError, Dataset, Split, SynthKind};

/// Where a named dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Idx {
        path: PathBuf,
        #[serde(default)]
        split: Split,
        #[serde(default)]
        limit: Option<usize>,
    },
    PpmDir {
        path: PathBuf,
        #[serde(default)]
        resize: Option<[usize; 2]>,
    },
    Noise {
        count: usize,
        resolution: [usize; 3],
        seed: u64,
    },
    Constant {
        count: usize,
        resolution: [usize; 3],
        seed: u64,
    },
}

impl DatasetSource {
    fn path(&self) -> Option<&Path> {
        match self {
            DatasetSource::Idx { path, .. } | DatasetSource::PpmDir { path, .. } => Some(path),
            _ => None,
        }
    }

    pub fn load(&self, name: &str) -> Result<Dataset, DataError> {
        let mut ds = match self {
            DatasetSource::Idx { path, split, limit } => {
                let mut ds = load_idx(path)?;
                ds.split = *split;
                match limit {
                    Some(n) => ds.truncated(*n)?,
                    None => ds,
                }
            }
            DatasetSource::PpmDir { path, resize } => load_ppm_dir(path, resize.map(|[h, w]| (h, w)))?,
            DatasetSource::Noise { count, resolution: [h, w, c], seed } => {
                synth_ood(SynthKind::Noise, *count, (*h, *w, *c), *seed)?
            }
            DatasetSource::Constant { count, resolution: [h, w, c], seed } => {
                synth_ood(SynthKind::Constant, *count, (*h, *w, *c), *seed)?
            }
        };
        ds.name = name.to_string();
        Ok(ds)
    }
}

/// JSON map from dataset names to sources. Relative paths resolve against
/// the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: BTreeMap<String, DatasetSource>,
}

impl Manifest {
    pub fn from_json(text: &str, base: &Path) -> Result<Self, DataError> {
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        for src in m.datasets.values_mut() {
            if let DatasetSource::Idx { path, .. } | DatasetSource::PpmDir { path, .. } = src {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Fails on the first referenced path that does not exist.
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, src) in &self.datasets {
            if let Some(p) = src.path() {
                if !p.exists() {
                    return Err(DataError::Manifest(format!("dataset {name:?}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn dataset(&self, name: &str) -> Result<Dataset, DataError> {
        self.datasets.get(name).ok_or_else(|| DataError::UnknownDataset(name.to_string()))?.load(name)
    }
}
