//! Loading a curated manifest as model inputs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::generator::{build_pattern_pyramid, PatternPyramid};
use crate::imaging::{area_resize, image_to_tensor, load_rgb};
use crate::pipeline::manifest::DatasetManifest;
use crate::pipeline::split::Split;
use crate::text::{MixedTokenizer, Vocabulary};
use crate::trainer::{TrainingSample, TrainingSet};

/// Vocabulary over the training captions.
pub fn manifest_vocabulary(manifest: &DatasetManifest) -> Vocabulary {
    Vocabulary::build(
        manifest.samples.iter().filter(|s| s.split == Split::Train).map(|s| s.caption.as_str()),
        &MixedTokenizer,
    )
}

/// Pattern pyramid of every cluster template.
pub fn load_patterns(dir: &Path, manifest: &DatasetManifest, model: &ModelConfig) -> Result<BTreeMap<usize, PatternPyramid>> {
    manifest
        .clusters
        .iter()
        .map(|c| {
            let img = load_rgb(&dir.join(&c.template_path))?;
            let p = build_pattern_pyramid(&img, model.stages, model.base_resolution, c.cluster_id, &c.template_path)?;
            Ok((c.cluster_id, p))
        })
        .collect()
}

/// Samples of one split, resized to the model's final resolution.
pub fn load_training_set(
    dir: &Path,
    manifest: &DatasetManifest,
    model: &ModelConfig,
    vocab: &Vocabulary,
    split: Split,
) -> Result<TrainingSet> {
    let top = model.final_resolution();
    let mut samples = Vec::new();
    for s in manifest.samples.iter().filter(|s| s.split == split) {
        let image = area_resize(&image_to_tensor(&load_rgb(&dir.join(&s.image_path))?), top, top);
        let caption = vocab.caption_truncated(&s.caption, &MixedTokenizer, model.max_caption_len)?;
        samples.push(TrainingSample::new(&image, caption, s.cluster_id, model)?);
    }
    let set = TrainingSet { samples, patterns: load_patterns(dir, manifest, model)? };
    set.validate(model)?;
    Ok(set)
}
