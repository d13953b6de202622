//! Dataset manifests: a JSON document declaring per-dataset raw score
//! ranges and the items, with paths relative to the manifest.
//!
//! ```json
//! {
//!   "datasets": { "synth": { "mos_min": 1.0, "mos_max": 5.0 } },
//!   "items": [ { "path": "v000.svqv", "mos": 3.2, "dataset": "synth", "split": "train" } ]
//! }
//! ```

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regression::MosRange;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub path: String,
    pub mos: f64,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// Class label for classification pretraining.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: IndexMap<String, MosRange>,
    pub items: Vec<ManifestItem>,
    /// Directory item paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// Clamp notices raised while loading.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

/// 1-based line containing byte `at`.
fn line_at(text: &str, at: usize) -> usize {
    text[..at].matches('\n').count() + 1
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut m: Manifest = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let items_at = text.find("\"items\"").unwrap_or(0);
        for (name, range) in &m.datasets {
            range.validate().map_err(|e| {
                let line = text.find(&format!("\"{name}\"")).map_or(0, |at| line_at(text, at));
                parse_err(format!("dataset {name:?} at line {line}: {e}"))
            })?;
        }
        let mut cursor = items_at;
        for (i, item) in m.items.iter_mut().enumerate() {
            let quoted = format!("\"{}\"", item.path);
            let line = match text[cursor..].find(&quoted) {
                Some(off) => {
                    cursor += off + quoted.len();
                    line_at(text, cursor)
                }
                None => 0,
            };
            let Some(range) = m.datasets.get(&item.dataset) else {
                return Err(parse_err(format!(
                    "item {i} ({}) at line {line} references undeclared dataset {:?}",
                    item.path, item.dataset
                )));
            };
            if !item.mos.is_finite() {
                return Err(parse_err(format!("item {i} at line {line}: MOS is not finite")));
            }
            if item.mos < range.mos_min || item.mos > range.mos_max {
                let clamped = item.mos.clamp(range.mos_min, range.mos_max);
                let msg = format!(
                    "item {i} ({}) at line {line}: MOS {} outside [{}, {}] of {:?}, clamped to {clamped}",
                    item.path, item.mos, range.mos_min, range.mos_max, item.dataset
                );
                log::warn!("{msg}");
                m.warnings.push(msg);
                item.mos = clamped;
            }
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, item: &ManifestItem) -> PathBuf {
        self.base_dir.join(&item.path)
    }

    pub fn range_of(&self, dataset: &str) -> Result<MosRange> {
        self.datasets
            .get(dataset)
            .copied()
            .ok_or_else(|| Error::Config(format!("no MOS range declared for dataset {dataset:?}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text, path)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, manifest.to_json()).map_err(|e| Error::io(path, e))
}
