//! End-to-end curation: captions, filters, crop, features, clustering,
//! outliers, templates, split, manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{image_to_tensor, load_rgb, save_png, tensor_to_image};
use crate::kernels::{map_items, Exec};
use crate::pipeline::crop::crop_caption_region;
use crate::pipeline::features::FeatureExtractor;
use crate::pipeline::filters::{length_ok, perplexity_ok, MAX_CAPTION_TOKENS, MIN_CAPTION_TOKENS};
use crate::pipeline::kmeans::kmeans_cluster;
use crate::pipeline::lm::CharNgramModel;
use crate::pipeline::manifest::{ClusterEntry, DatasetManifest, ManifestRules, ManifestSample};
use crate::pipeline::ocr::{raw_samples, CaptionSource, RawSample};
use crate::pipeline::outliers::remove_outliers;
use crate::pipeline::split::{stratified_split, Split};
use crate::pipeline::template::medoid;
use crate::tensor::Tensor;

pub const LM_FILE: &str = "lm.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub k: usize,
    pub max_iters: usize,
    pub z_threshold: f64,
    pub min_cluster_size: usize,
    pub ppl_low: f64,
    pub ppl_high: f64,
    pub lm_order: usize,
    pub lm_alpha: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Bottom fraction of each image holding the caption.
    pub band_fraction: f64,
    pub canonical_resolution: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 40,
            max_iters: 100,
            z_threshold: 2.0,
            min_cluster_size: 3,
            ppl_low: 2.0,
            ppl_high: 500.0,
            lm_order: 2,
            lm_alpha: 0.1,
            min_len: MIN_CAPTION_TOKENS,
            max_len: MAX_CAPTION_TOKENS,
            band_fraction: 0.2,
            canonical_resolution: 64,
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn rules(&self, split_done: bool) -> ManifestRules {
        ManifestRules {
            min_len: self.min_len,
            max_len: self.max_len,
            train_fraction: split_done.then_some(self.train_fraction),
        }
    }
}

/// Sample counts after each stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub raw: usize,
    pub after_length: usize,
    pub after_perplexity: usize,
    pub after_crop: usize,
    pub after_outliers: usize,
    pub clusters: usize,
    pub train: usize,
    pub test: usize,
    pub inertia_trace: Vec<f64>,
}

struct Cropped {
    sample: RawSample,
    image: Tensor,
}

fn image_name(source_id: &str) -> String {
    let stem = Path::new(source_id).file_stem().and_then(|s| s.to_str()).unwrap_or(source_id);
    format!("images/{stem}.png")
}

/// Curate the captioned images under `input_dir` into `out_dir`, writing the
/// cropped images, cluster templates, the trained caption model and the manifest.
pub fn run_pipeline(
    input_dir: &Path,
    captions: &dyn CaptionSource,
    out_dir: &Path,
    cfg: &PipelineConfig,
    extractor: &dyn FeatureExtractor,
    exec: Exec,
) -> Result<(DatasetManifest, PipelineReport)> {
    let mut report = PipelineReport::default();
    let raw = raw_samples(input_dir, captions);
    report.raw = raw.len();

    let lm = CharNgramModel::train(cfg.lm_order, cfg.lm_alpha, raw.iter().map(|s| s.caption_text.as_str()))?;
    let by_length: Vec<RawSample> = raw.into_iter().filter(|s| length_ok(&s.caption_text, cfg.min_len, cfg.max_len)).collect();
    report.after_length = by_length.len();
    let mut by_ppl = Vec::new();
    for s in by_length {
        if perplexity_ok(&s.caption_text, &lm, cfg.ppl_low, cfg.ppl_high)? {
            by_ppl.push(s);
        }
    }
    report.after_perplexity = by_ppl.len();

    let crops = map_items(exec, &by_ppl, |s| {
        load_rgb(&s.image_path).and_then(|img| crop_caption_region(&image_to_tensor(&img), cfg.band_fraction, cfg.canonical_resolution))
    });
    let mut kept: Vec<Cropped> = Vec::new();
    for (sample, crop) in by_ppl.into_iter().zip(crops) {
        match crop {
            Ok(image) => kept.push(Cropped { sample, image }),
            Err(e) => log::warn!("skipping {}: {e}", sample.source_id),
        }
    }
    report.after_crop = kept.len();
    if kept.is_empty() {
        return Err(Error::Empty("curated corpus"));
    }

    let vectors: Vec<Vec<f64>> = map_items(exec, &kept, |c| extractor.extract(&tensor_to_image(&c.image)));
    let clustering = kmeans_cluster(&vectors, cfg.k.min(vectors.len()), cfg.seed, cfg.max_iters)?;
    report.inertia_trace = clustering.inertia_trace.clone();
    let filtered = remove_outliers(&clustering.assignments, &vectors, &clustering.centroids, cfg.z_threshold, cfg.min_cluster_size);

    // renumber surviving clusters densely in ascending order of their original id
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in filtered.kept.iter().enumerate() {
        if let Some(c) = c {
            members.entry(*c).or_default().push(i);
        }
    }
    if members.is_empty() {
        return Err(Error::Empty("clusters after outlier removal"));
    }

    std::fs::create_dir_all(out_dir.join("images")).map_err(|e| Error::io(format!("create {}", out_dir.display()), e))?;
    std::fs::create_dir_all(out_dir.join("templates")).map_err(|e| Error::io(format!("create {}", out_dir.display()), e))?;
    lm.save(&out_dir.join(LM_FILE))?;

    let mut manifest = DatasetManifest::default();
    let mut sample_index = Vec::new();
    for (new_id, idx) in members.values().enumerate() {
        let template = medoid(idx, &vectors)?;
        let template_path = format!("templates/cluster_{new_id:03}.png");
        save_png(&tensor_to_image(&kept[template].image), &out_dir.join(&template_path))?;
        manifest.clusters.push(ClusterEntry { cluster_id: new_id, template_path, member_count: idx.len() });
        for &i in idx {
            sample_index.push((i, new_id));
        }
    }
    sample_index.sort_unstable();
    for (i, cluster_id) in sample_index {
        let c = &kept[i];
        let image_path = image_name(&c.sample.source_id);
        save_png(&tensor_to_image(&c.image), &out_dir.join(&image_path))?;
        manifest.samples.push(ManifestSample {
            image_path,
            caption: c.sample.caption_text.clone(),
            cluster_id,
            split: Split::Train,
            source_id: c.sample.source_id.clone(),
        });
    }
    report.after_outliers = manifest.samples.len();
    report.clusters = manifest.clusters.len();
    manifest.validate(&cfg.rules(false))?;

    if manifest.samples.len() >= 2 {
        let labels: Vec<usize> = manifest.samples.iter().map(|s| s.cluster_id).collect();
        let split = stratified_split(&labels, cfg.train_fraction, cfg.seed)?;
        for (s, tag) in manifest.samples.iter_mut().zip(split) {
            s.split = tag;
        }
        manifest.validate(&cfg.rules(true))?;
    }
    report.train = manifest.train_count();
    report.test = manifest.samples.len() - report.train;

    manifest.write(out_dir)?;
    crate::trainer::write_atomic(&out_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok((manifest, report))
}

/// Re-apply the caption filters to a curated manifest. Cluster ids, templates
/// and split tags are kept; member counts are recomputed and emptied clusters
/// removed. A manifest produced by [`run_pipeline`] passes through unchanged.
pub fn reapply_filters(manifest: &DatasetManifest, lm: &CharNgramModel, cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for s in &manifest.samples {
        if length_ok(&s.caption, cfg.min_len, cfg.max_len) && perplexity_ok(&s.caption, lm, cfg.ppl_low, cfg.ppl_high)? {
            samples.push(s.clone());
        }
    }
    let clusters = manifest
        .clusters
        .iter()
        .filter_map(|c| {
            let n = samples.iter().filter(|s| s.cluster_id == c.cluster_id).count();
            (n > 0).then(|| ClusterEntry { member_count: n, ..c.clone() })
        })
        .collect();
    let out = DatasetManifest { samples, clusters };
    out.validate(&cfg.rules(false))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::features::ThumbnailFeatures;
    use crate::pipeline::ocr::TsvCaptions;
    use crate::synth::write_raw_corpus;

    fn config() -> PipelineConfig {
        PipelineConfig { k: 4, canonical_resolution: 16, seed: 5, ..PipelineConfig::default() }
    }

    #[test]
    fn end_to_end_small_corpus() {
        let raw = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let tsv = write_raw_corpus(raw.path(), 40, 32, 1).unwrap();
        let caps = TsvCaptions::load(&tsv).unwrap();
        let cfg = config();
        let (m, report) = run_pipeline(raw.path(), &caps, out.path(), &cfg, &ThumbnailFeatures::default(), Exec::default()).unwrap();
        assert_eq!(report.raw, 40);
        assert!(report.after_length < 40 && report.after_perplexity < report.after_length);
        assert!(m.samples.iter().all(|s| !s.caption.starts_with('哈')));
        m.validate(&cfg.rules(true)).unwrap();
        assert_eq!(DatasetManifest::load(out.path()).unwrap(), m);
        for w in report.inertia_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let lm = CharNgramModel::load(&out.path().join(LM_FILE)).unwrap();
        assert_eq!(reapply_filters(&m, &lm, &cfg).unwrap(), m);
    }
}
