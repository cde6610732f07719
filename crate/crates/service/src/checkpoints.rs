//! Checkpoint discovery and a digest-keyed LRU of restored generators.

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use memeface_core::trainer::load_checkpoint;
use memeface_core::trainer::train::{restore_generator, RestoredGenerator};

use crate::error::ServiceError;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub epoch: u64,
    pub path: PathBuf,
    /// SHA-256 of the file bytes, hex.
    pub digest: String,
}

fn epoch_of(name: &str) -> Option<u64> {
    name.strip_prefix("gan_epoch_")?.strip_suffix(".ckpt")?.parse().ok()
}

/// GAN checkpoints in `dir`, ascending by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<CheckpointInfo>, ServiceError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| ServiceError::Unavailable(format!("cannot read checkpoint directory {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| ServiceError::Unavailable(format!("cannot read {}: {e}", dir.display())))?;
        let name = entry.file_name();
        let Some(epoch) = name.to_str().and_then(epoch_of) else { continue };
        let path = entry.path();
        let bytes = std::fs::read(&path).map_err(|e| ServiceError::Unavailable(format!("cannot read {}: {e}", path.display())))?;
        out.push(CheckpointInfo { epoch, path, digest: hex::encode(Sha256::digest(&bytes)) });
    }
    out.sort_by(|a, b| a.epoch.cmp(&b.epoch).then_with(|| a.path.cmp(&b.path)));
    Ok(out)
}

/// Restored generators keyed by file digest, so a rewritten file is reloaded.
pub struct ModelCache {
    inner: Mutex<LruCache<String, Arc<RestoredGenerator>>>,
}

impl ModelCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("positive");
        Self { inner: Mutex::new(LruCache::new(cap)) }
    }

    pub fn get(&self, info: &CheckpointInfo) -> Result<Arc<RestoredGenerator>, ServiceError> {
        if let Some(hit) = self.inner.lock().expect("cache lock").get(&info.digest) {
            return Ok(hit.clone());
        }
        let ckpt = load_checkpoint(&info.path).map_err(|e| ServiceError::Unavailable(format!("{}: {e}", info.path.display())))?;
        let restored = Arc::new(restore_generator(&ckpt)?);
        self.inner.lock().expect("cache lock").put(info.digest.clone(), restored.clone());
        Ok(restored)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_order_and_digests() {
        let dir = tempfile::tempdir().unwrap();
        assert!(list_checkpoints(dir.path()).unwrap().is_empty());
        std::fs::write(dir.path().join("gan_epoch_000010.ckpt"), b"ten").unwrap();
        std::fs::write(dir.path().join("gan_epoch_000005.ckpt"), b"five").unwrap();
        std::fs::write(dir.path().join("damsm.ckpt"), b"other").unwrap();
        let a = list_checkpoints(dir.path()).unwrap();
        assert_eq!(a.iter().map(|c| c.epoch).collect::<Vec<_>>(), vec![5, 10]);
        assert_eq!(a, list_checkpoints(dir.path()).unwrap());
        std::fs::write(dir.path().join("gan_epoch_000005.ckpt"), b"FIVE").unwrap();
        let b = list_checkpoints(dir.path()).unwrap();
        assert_ne!(a[0].digest, b[0].digest);
        assert_eq!(a[1].digest, b[1].digest);
        assert!(list_checkpoints(&dir.path().join("missing")).is_err());
    }
}
