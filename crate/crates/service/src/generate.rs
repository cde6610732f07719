//! Replaying a caption through every checkpoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use memeface_core::generator::{build_pattern_pyramid, generate, NoiseVector};
use memeface_core::imaging::{encode_png, load_rgb, tensor_to_image, upscale_nearest};
use memeface_core::pipeline::DatasetManifest;
use memeface_core::text::{condition_augment, encode_text, MixedTokenizer, Vocabulary};

use crate::checkpoints::{list_checkpoints, CheckpointInfo, ModelCache};
use crate::error::ServiceError;

pub const MAX_TEXT_CHARS: usize = 200;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub text: String,
    #[serde(default)]
    pub template_id: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub epoch: u64,
    pub image_b64: String,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub frames: Vec<Frame>,
    pub log: Vec<String>,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct Template {
    pub id: usize,
    pub member_count: usize,
    pub image: RgbImage,
}

/// Cluster templates listed in a curated manifest directory.
pub fn load_templates(manifest_dir: &Path) -> Result<BTreeMap<usize, Template>, ServiceError> {
    let manifest = DatasetManifest::load(manifest_dir).map_err(|e| ServiceError::Unavailable(format!("template manifest: {e}")))?;
    manifest
        .clusters
        .iter()
        .map(|c| {
            let image = load_rgb(&manifest_dir.join(&c.template_path)).map_err(|e| ServiceError::Unavailable(e.to_string()))?;
            Ok((c.cluster_id, Template { id: c.cluster_id, member_count: c.member_count, image }))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub checkpoint_dir: PathBuf,
    pub vocab_path: PathBuf,
    pub manifest_dir: PathBuf,
    pub default_template: Option<usize>,
    /// Nearest-neighbour upscale target; must be a multiple of the model's final resolution.
    pub output_resolution: Option<usize>,
    pub cache_size: usize,
}

/// Shared, read-only service state plus the model cache.
pub struct Service {
    pub config: ServiceConfig,
    pub vocab: Option<Vocabulary>,
    pub templates: BTreeMap<usize, Template>,
    pub cache: ModelCache,
}

impl Service {
    /// Missing vocabulary or templates leave the service up but degraded.
    pub fn open(config: ServiceConfig) -> Self {
        let vocab = match Vocabulary::load(&config.vocab_path) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("vocabulary unavailable: {e}");
                None
            }
        };
        let templates = load_templates(&config.manifest_dir).unwrap_or_else(|e| {
            log::warn!("templates unavailable: {e}");
            BTreeMap::new()
        });
        let cache = ModelCache::new(config.cache_size);
        Self { config, vocab, templates, cache }
    }

    pub fn checkpoints(&self) -> Result<Vec<CheckpointInfo>, ServiceError> {
        list_checkpoints(&self.config.checkpoint_dir)
    }

    /// Validate a request and resolve what it needs before any model runs.
    pub fn prepare(&self, req: &GenerateRequest) -> Result<Prepared<'_>, ServiceError> {
        let text = req.text.trim();
        if text.is_empty() {
            return Err(ServiceError::BadRequest("text is empty".into()));
        }
        if text.chars().count() > MAX_TEXT_CHARS {
            return Err(ServiceError::BadRequest(format!("text exceeds {MAX_TEXT_CHARS} characters")));
        }
        let vocab = self.vocab.as_ref().ok_or_else(|| ServiceError::Unavailable("vocabulary not loaded".into()))?;
        let valid: Vec<usize> = self.templates.keys().copied().collect();
        let id = match req.template_id.or(self.config.default_template) {
            Some(id) => id,
            None => *valid.first().ok_or_else(|| ServiceError::Unavailable("no templates loaded".into()))?,
        };
        let template = self.templates.get(&id).ok_or(ServiceError::UnknownTemplate { id, valid })?;
        let checkpoints = self.checkpoints()?;
        if checkpoints.is_empty() {
            return Err(ServiceError::Unavailable("no checkpoints available".into()));
        }
        let seed = req.seed.unwrap_or_else(rand::random);
        Ok(Prepared { text: text.to_string(), vocab, template, checkpoints, seed })
    }

    /// Generate with one checkpoint; the same seed gives the same noise at every checkpoint.
    pub fn frame(&self, p: &Prepared<'_>, info: &CheckpointInfo) -> Result<(Frame, usize, String), ServiceError> {
        let start = Instant::now();
        let restored = self.cache.get(info)?;
        let model = &restored.model;
        let caption = p
            .vocab
            .caption_truncated(&p.text, &MixedTokenizer, model.max_caption_len)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if p.vocab.len() != model.vocab_size {
            return Err(ServiceError::Unavailable(format!(
                "vocabulary has {} tokens, checkpoint epoch {} expects {}",
                p.vocab.len(),
                info.epoch,
                model.vocab_size
            )));
        }
        let encoding = encode_text(&caption, &restored.text)?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let z = NoiseVector::sample(model.noise_dim, model.noise, &mut rng);
        let cond = condition_augment(&encoding.sentence_vector, &restored.generator.cond, &mut rng)?;
        let pyramid = build_pattern_pyramid(&p.template.image, model.stages, model.base_resolution, p.template.id, "")?;
        let out = generate(&cond, &z, &encoding, &pyramid, &restored.generator)?;
        let mut image = out.edited.last().expect("at least one stage").clone();
        let native = model.final_resolution();
        let mut resolution = native;
        if let Some(target) = self.config.output_resolution {
            if target % native != 0 || target < native {
                return Err(ServiceError::Internal(format!("output resolution {target} is not a multiple of {native}")));
            }
            image = upscale_nearest(&image, target / native);
            resolution = target;
        }
        let png = encode_png(&tensor_to_image(&image))?;
        let elapsed_ms = start.elapsed().as_millis() as u64;
        let line = format!(
            "epoch {} checkpoint {} sha256 {} generated in {elapsed_ms} ms",
            info.epoch,
            info.path.file_name().and_then(|n| n.to_str()).unwrap_or("?"),
            &info.digest[..12]
        );
        Ok((Frame { epoch: info.epoch, image_b64: STANDARD.encode(png), elapsed_ms }, resolution, line))
    }

    pub fn handle_generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, ServiceError> {
        let p = self.prepare(req)?;
        let mut log = p.header();
        let mut frames = Vec::with_capacity(p.checkpoints.len());
        let mut resolution = 0;
        for info in &p.checkpoints {
            let (frame, res, line) = self.frame(&p, info)?;
            log.push(line);
            frames.push(frame);
            resolution = res;
        }
        log.push(format!("done: {} frames", frames.len()));
        Ok(GenerateResponse { frames, log, resolution })
    }
}

/// A validated request bound to the service's current checkpoints.
pub struct Prepared<'a> {
    pub text: String,
    pub vocab: &'a Vocabulary,
    pub template: &'a Template,
    pub checkpoints: Vec<CheckpointInfo>,
    pub seed: u64,
}

impl Prepared<'_> {
    pub fn header(&self) -> Vec<String> {
        vec![
            format!("text {:?}", self.text),
            format!("template {} seed {}", self.template.id, self.seed),
            format!("{} checkpoints", self.checkpoints.len()),
        ]
    }
}
