//! Curated dataset manifest: `manifest.jsonl` (one sample per line) and
//! `clusters.json`. Paths are relative to the manifest directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::filters::token_count;
use crate::pipeline::split::Split;
use crate::trainer::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CLUSTERS_FILE: &str = "clusters.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub image_path: String,
    pub caption: String,
    pub cluster_id: usize,
    pub split: Split,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterEntry {
    pub cluster_id: usize,
    pub template_path: String,
    pub member_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestSample>,
    pub clusters: Vec<ClusterEntry>,
}

/// Bounds the validator enforces.
#[derive(Clone, Copy, Debug)]
pub struct ManifestRules {
    pub min_len: usize,
    pub max_len: usize,
    /// Checked only once samples carry split tags.
    pub train_fraction: Option<f64>,
}

impl DatasetManifest {
    pub fn train_count(&self) -> usize {
        self.samples.iter().filter(|s| s.split == Split::Train).count()
    }

    pub fn validate(&self, rules: &ManifestRules) -> Result<()> {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for c in &self.clusters {
            if counts.insert(c.cluster_id, 0).is_some() {
                return Err(Error::Manifest(format!("duplicate cluster {}", c.cluster_id)));
            }
        }
        for s in &self.samples {
            let n = counts
                .get_mut(&s.cluster_id)
                .ok_or_else(|| Error::Manifest(format!("{} references unknown cluster {}", s.source_id, s.cluster_id)))?;
            *n += 1;
            let len = token_count(&s.caption);
            if !(rules.min_len..=rules.max_len).contains(&len) {
                return Err(Error::Manifest(format!("{} caption has {len} tokens", s.source_id)));
            }
        }
        for c in &self.clusters {
            if counts[&c.cluster_id] != c.member_count {
                return Err(Error::Manifest(format!(
                    "cluster {} lists {} members, found {}",
                    c.cluster_id, c.member_count, counts[&c.cluster_id]
                )));
            }
        }
        if let Some(f) = rules.train_fraction {
            let expected = f * self.samples.len() as f64;
            if (self.train_count() as f64 - expected).abs() > 1.0 {
                return Err(Error::Manifest(format!("{} train samples, expected about {expected:.1}", self.train_count())));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        write_atomic(&dir.join(MANIFEST_FILE), self.to_jsonl()?.as_bytes())?;
        write_atomic(&dir.join(CLUSTERS_FILE), serde_json::to_string_pretty(&self.clusters)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(format!("read {}", p.display()), e))
        };
        let samples = read(MANIFEST_FILE)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestSample>, _>>()?;
        let clusters = serde_json::from_str(&read(CLUSTERS_FILE)?)?;
        Ok(Self { samples, clusters })
    }
}
