//! Caption sources. Captions come from a sidecar TSV of `file<TAB>caption`
//! lines standing in for an OCR engine.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Supplies the caption text for an image.
pub trait CaptionSource {
    fn caption(&self, image_name: &str) -> Option<String>;
    /// Image names this source knows about, in a stable order.
    fn names(&self) -> Vec<String>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TsvCaptions {
    entries: BTreeMap<String, String>,
}

impl TsvCaptions {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, caption) = line
                .split_once('\t')
                .ok_or_else(|| Error::InvalidArgument(format!("captions line {}: missing tab", i + 1)))?;
            entries.insert(name.trim().to_string(), caption.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CaptionSource for TsvCaptions {
    fn caption(&self, image_name: &str) -> Option<String> {
        self.entries.get(image_name).cloned()
    }

    fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSample {
    pub image_path: PathBuf,
    pub caption_text: String,
    pub source_id: String,
}

/// Pair every captioned image under `dir` with its caption.
pub fn raw_samples(dir: &Path, source: &dyn CaptionSource) -> Vec<RawSample> {
    source
        .names()
        .into_iter()
        .filter_map(|name| {
            let path = dir.join(&name);
            if !path.is_file() {
                log::warn!("caption for missing image {}", path.display());
                return None;
            }
            let caption_text = source.caption(&name)?;
            Some(RawSample { image_path: path, caption_text, source_id: name })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_sorts() {
        let t = TsvCaptions::parse("b.png\t你好 世界\n\na.png\thello there\n").unwrap();
        assert_eq!(t.names(), vec!["a.png", "b.png"]);
        assert_eq!(t.caption("b.png").unwrap(), "你好 世界");
        assert!(TsvCaptions::parse("no tab here").is_err());
    }
}
