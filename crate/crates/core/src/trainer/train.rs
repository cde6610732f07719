//! The adversarial training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{Discriminator, DiscriminatorStack};
use crate::config::ModelConfig;
use crate::damsm::{matching_score_graph, Damsm, Gammas};
use crate::error::{Error, Result};
use crate::generator::{Generator, NoiseVector, PatternPyramid, StageVars};
use crate::graph::{Graph, Var};
use crate::imaging::area_resize;
use crate::nn::{export_params, import_params, Adam, AdamConfig, Module};
use crate::tensor::Tensor;
use crate::text::{standard_normal, Caption, TextEncoder};

use super::checkpoint::{save_checkpoint, Checkpoint, CheckpointKind};
use super::losses::{discriminator_stage_term, generator_objective, DiscriminatorLogits, GeneratorLossBreakdown, LossWeights};

/// When the generator is updated relative to the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSchedule {
    /// Discriminator every batch; generator on every batch of epochs where
    /// `epoch % generator_update_period_epochs == 0` (0-based epochs).
    #[default]
    EveryNEpochs,
    /// Discriminator then generator on every batch.
    PerBatchAlternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: UpdateSchedule,
    pub generator_update_period_epochs: usize,
    pub checkpoint_period_epochs: usize,
    pub weights: LossWeights,
    pub gammas: Gammas,
    /// Score real images against another sample's caption as extra negatives.
    pub mismatched_captions: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 14,
            epochs: 200,
            schedule: UpdateSchedule::EveryNEpochs,
            generator_update_period_epochs: 5,
            checkpoint_period_epochs: 5,
            weights: LossWeights::default(),
            gammas: Gammas::default(),
            mismatched_captions: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("generator_update_period_epochs", self.generator_update_period_epochs),
            ("checkpoint_period_epochs", self.checkpoint_period_epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// 1-based epochs after which a checkpoint is written.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        (1..=self.epochs)
            .filter(|e| e % self.checkpoint_period_epochs == 0 || *e == self.epochs)
            .collect()
    }

    pub fn updates_generator(&self, epoch: usize) -> bool {
        match self.schedule {
            UpdateSchedule::EveryNEpochs => epoch.is_multiple_of(self.generator_update_period_epochs),
            UpdateSchedule::PerBatchAlternating => true,
        }
    }
}

/// A real image at every stage resolution with its caption and cluster.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub real: Vec<Tensor>,
    pub caption: Caption,
    pub cluster: usize,
}

impl TrainingSample {
    /// `image [3, R, R]` at the final stage resolution.
    pub fn new(image: &Tensor, caption: Caption, cluster: usize, model: &ModelConfig) -> Result<Self> {
        let top = model.final_resolution();
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("training image must be [3, R, R], got {s:?}")));
        }
        if s[1] != top || s[2] != top {
            return Err(Error::Resolution { expected: top, actual: s[1] });
        }
        let real = (0..model.stages)
            .map(|i| {
                let r = model.stage_resolution(i);
                area_resize(image, r, r)
            })
            .collect();
        Ok(Self { real, caption, cluster })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    pub patterns: BTreeMap<usize, PatternPyramid>,
}

impl TrainingSet {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        for p in self.patterns.values() {
            if p.stages() != model.stages {
                return Err(Error::InvalidArgument(format!(
                    "pattern for cluster {} has {} levels, model has {} stages",
                    p.cluster_id,
                    p.stages(),
                    model.stages
                )));
            }
        }
        if let Some(s) = self.samples.iter().find(|s| !self.patterns.contains_key(&s.cluster)) {
            return Err(Error::InvalidArgument(format!("no pattern for cluster {}", s.cluster)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    pub discriminator: f64,
    pub generator: Option<GeneratorLossBreakdown>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<LogRecord>,
    pub checkpoint_epochs: Vec<usize>,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Noise for one batch.
pub struct BatchNoise {
    pub z: Tensor,
    pub eps: Tensor,
}

impl BatchNoise {
    pub fn sample(n: usize, model: &ModelConfig, rng: &mut impl Rng) -> Self {
        let rows: Vec<Tensor> = (0..n).map(|_| NoiseVector::sample(model.noise_dim, model.noise, rng).z).collect();
        Self {
            z: Tensor::stack(&rows),
            eps: standard_normal(&[n, model.cond_dim], rng),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    model: ModelConfig,
    train: Option<TrainConfig>,
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("gan_epoch_{epoch:06}.ckpt")
}

pub const DAMSM_FILE_NAME: &str = "damsm.ckpt";

struct Forward {
    vars: StageVars,
    sentences: Var,
    mu: Var,
    logvar: Var,
}

pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub text: TextEncoder,
    pub damsm: Damsm,
    pub generator: Generator,
    pub discriminators: DiscriminatorStack,
    generator_opt: Adam,
    text_opt: Option<Adam>,
    discriminator_opt: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh generator and discriminators around a pretrained, frozen matching model.
    pub fn new(model: ModelConfig, config: TrainConfig, damsm: Damsm) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let text = if model.share_text_encoder {
            damsm.text.clone()
        } else {
            TextEncoder::new(model.vocab_size, model.embed_dim, model.text_dim, &mut rng)
        };
        let generator = Generator::new(&model, &mut rng);
        let discriminators = DiscriminatorStack(Discriminator::for_stages(&model, &mut rng));
        let adam = config.adam();
        Ok(Self {
            generator_opt: Adam::new(adam, &generator),
            text_opt: (!model.share_text_encoder).then(|| Adam::new(adam, &text)),
            discriminator_opt: Adam::new(adam, &discriminators),
            model,
            config,
            text,
            damsm,
            generator,
            discriminators,
            rng,
        })
    }

    fn patterns(&self, g: &Graph, set: &TrainingSet, batch: &[usize]) -> Vec<Var> {
        (0..self.model.stages)
            .map(|i| {
                let levels: Vec<Tensor> = batch
                    .iter()
                    .map(|&b| set.patterns[&set.samples[b].cluster].levels[i].clone())
                    .collect();
                g.constant(Tensor::stack(&levels))
            })
            .collect()
    }

    fn forward(&self, g: &Graph, set: &TrainingSet, batch: &[usize], noise: &BatchNoise) -> Result<Forward> {
        let mut words = Vec::with_capacity(batch.len());
        let mut sents = Vec::with_capacity(batch.len());
        for &b in batch {
            let (w, s) = self.text.encode_graph(g, &set.samples[b].caption)?;
            words.push(w);
            sents.push(s);
        }
        let sentences = g.concat(&sents, 0);
        let (c, mu, logvar) = self.generator.cond.forward(g, sentences, g.constant(noise.eps.clone()));
        let z = g.constant(noise.z.clone());
        let patterns = self.patterns(g, set, batch);
        let vars = self.generator.forward(g, c, z, &words, &patterns)?;
        Ok(Forward { vars, sentences, mu, logvar })
    }

    /// One discriminator update; returns the summed stage loss.
    pub fn discriminator_step(&mut self, set: &TrainingSet, batch: &[usize], noise: &BatchNoise, epoch: usize, index: usize) -> Result<f64> {
        let g = Graph::new();
        g.freeze(&self.generator);
        g.freeze(&self.text);
        let f = self.forward(&g, set, batch, noise)?;
        let n = batch.len();
        let sentences = g.detach(f.sentences);
        let mismatched = (self.config.mismatched_captions && n > 1)
            .then(|| g.concat(&[g.narrow(sentences, 0, 1, n - 1), g.narrow(sentences, 0, 0, 1)], 0));
        let mut total: Option<Var> = None;
        for (i, d) in self.discriminators.0.iter().enumerate() {
            let reals: Vec<Tensor> = batch.iter().map(|&b| set.samples[b].real[i].clone()).collect();
            let real_features = d.trunk(&g, g.constant(Tensor::stack(&reals)));
            let fake_features = d.trunk(&g, g.detach(f.vars.edited[i]));
            let logits = DiscriminatorLogits {
                real_uncond: d.uncond_logits(&g, real_features),
                real_cond: d.cond_logits(&g, real_features, sentences),
                fake_uncond: d.uncond_logits(&g, fake_features),
                fake_cond: d.cond_logits(&g, fake_features, sentences),
                mismatched_cond: mismatched.map(|m| d.cond_logits(&g, real_features, m)),
            };
            let term = discriminator_stage_term(&g, &logits);
            if !g.item(term).is_finite() {
                return Err(diverged(epoch, index, format!("discriminator stage {i}")));
            }
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        let total = total.expect("at least one stage");
        let value = g.item(total);
        let grads = g.backward(total);
        self.discriminator_opt.update(&mut self.discriminators, &grads);
        Ok(value)
    }

    /// One generator update (plus the text encoder when it is not shared).
    pub fn generator_step(
        &mut self,
        set: &TrainingSet,
        batch: &[usize],
        noise: &BatchNoise,
        epoch: usize,
        index: usize,
    ) -> Result<GeneratorLossBreakdown> {
        let g = Graph::new();
        g.freeze(&self.discriminators);
        g.freeze(&self.damsm);
        if self.model.share_text_encoder {
            g.freeze(&self.text);
        }
        let f = self.forward(&g, set, batch, noise)?;
        let captions: Vec<Caption> = batch.iter().map(|&b| set.samples[b].caption.clone()).collect();
        let terms = generator_objective(
            &g,
            &f.vars.edited,
            f.sentences,
            f.mu,
            f.logvar,
            &captions,
            &self.discriminators.0,
            &self.damsm,
            self.config.weights,
            self.config.gammas,
        )
        .map_err(|e| diverged(epoch, index, e.to_string()))?;
        let breakdown = terms.breakdown(&g);
        let grads = g.backward(terms.total);
        self.generator_opt.update(&mut self.generator, &grads);
        if let Some(opt) = self.text_opt.as_mut() {
            opt.update(&mut self.text, &grads);
        }
        Ok(breakdown)
    }

    /// Run the configured number of epochs, writing checkpoints to `out_dir`
    /// and JSON lines to `log` when given.
    pub fn run(&mut self, set: &TrainingSet, out_dir: Option<&Path>, mut log: Option<&mut dyn Write>) -> Result<TrainReport> {
        set.validate(&self.model)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        }
        let mut report = TrainReport::default();
        let mut order: Vec<usize> = (0..set.samples.len()).collect();
        let start = Instant::now();
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.rng);
            let update_g = self.config.updates_generator(epoch);
            for (index, batch) in order.clone().chunks(self.config.batch_size).enumerate() {
                let noise = BatchNoise::sample(batch.len(), &self.model, &mut self.rng);
                let d = self.discriminator_step(set, batch, &noise, epoch, index).inspect_err(|e| log::error!("{e}"))?;
                let gl = if update_g {
                    Some(self.generator_step(set, batch, &noise, epoch, index).inspect_err(|e| log::error!("{e}"))?)
                } else {
                    None
                };
                let record = LogRecord {
                    epoch,
                    batch: index,
                    discriminator: d,
                    generator: gl,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                if let Some(w) = log.as_deref_mut() {
                    let line = serde_json::to_string(&record)?;
                    writeln!(w, "{line}").map_err(|e| Error::io("write training log", e))?;
                }
                report.records.push(record);
            }
            let done = epoch + 1;
            if done % self.config.checkpoint_period_epochs == 0 || done == self.config.epochs {
                report.checkpoint_epochs.push(done);
                if let Some(dir) = out_dir {
                    let path = dir.join(checkpoint_file_name(done));
                    save_checkpoint(&self.checkpoint(done as u64)?, &path)?;
                    log::info!("saved {}", path.display());
                    report.checkpoint_paths.push(path);
                }
            }
        }
        Ok(report)
    }

    pub fn checkpoint(&self, epoch: u64) -> Result<Checkpoint> {
        let config_json = serde_json::to_string(&SavedConfig {
            model: self.model.clone(),
            train: Some(self.config.clone()),
        })?;
        let mut tensors = Vec::new();
        for (prefix, module) in [
            ("text", &self.text as &dyn Module),
            ("generator", &self.generator),
            ("discriminator", &self.discriminators),
        ] {
            tensors.extend(export_params(module).into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        Ok(Checkpoint { kind: CheckpointKind::Gan, epoch, config_json, tensors })
    }

    /// Final-stage edited images for every sample under seeded noise.
    pub fn generate_set(&self, set: &TrainingSet, seed: u64) -> Result<Vec<Tensor>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<usize> = (0..set.samples.len()).collect();
        let noise = BatchNoise::sample(all.len(), &self.model, &mut rng);
        let g = Graph::new();
        let f = self.forward(&g, set, &all, &noise)?;
        let last = g.value(*f.vars.edited.last().expect("stages"));
        Ok((0..all.len()).map(|i| last.select(i)).collect())
    }

    /// Mean word-level matching score of each generated image against its own caption.
    pub fn mean_matching_score(&self, set: &TrainingSet, seed: u64) -> Result<f64> {
        let images = self.generate_set(set, seed)?;
        let g = Graph::new();
        let (regions, _) = self.damsm.image.forward(&g, g.constant(Tensor::stack(&images)))?;
        let s = g.shape(regions);
        let mut total = 0.0;
        for (i, sample) in set.samples.iter().enumerate() {
            let r = g.reshape(g.narrow(regions, 0, i, 1), &[s[1], s[2]]);
            let (w, _) = self.damsm.text.encode_graph(&g, &sample.caption)?;
            total += g.item(matching_score_graph(&g, r, w, self.config.gammas.gamma1, self.config.gammas.gamma2));
        }
        Ok(total / set.samples.len() as f64)
    }
}

fn diverged(epoch: usize, batch: usize, term: String) -> Error {
    Error::Diverged { epoch, batch, term }
}

/// Generator-side modules restored from a GAN checkpoint.
pub struct RestoredGenerator {
    pub model: ModelConfig,
    pub text: TextEncoder,
    pub generator: Generator,
}

pub fn restore_generator(checkpoint: &Checkpoint) -> Result<RestoredGenerator> {
    if checkpoint.kind != CheckpointKind::Gan {
        return Err(Error::InvalidArgument("not a GAN checkpoint".into()));
    }
    let saved: SavedConfig = serde_json::from_str(&checkpoint.config_json)?;
    let model = saved.model;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut text = TextEncoder::new(model.vocab_size, model.embed_dim, model.text_dim, &mut rng);
    let mut generator = Generator::new(&model, &mut rng);
    import_params(&mut text, &checkpoint.section("text"))?;
    import_params(&mut generator, &checkpoint.section("generator"))?;
    Ok(RestoredGenerator { model, text, generator })
}

pub fn restore_discriminators(checkpoint: &Checkpoint) -> Result<DiscriminatorStack> {
    let saved: SavedConfig = serde_json::from_str(&checkpoint.config_json)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut stack = DiscriminatorStack(Discriminator::for_stages(&saved.model, &mut rng));
    import_params(&mut stack, &checkpoint.section("discriminator"))?;
    Ok(stack)
}

pub fn damsm_checkpoint(damsm: &Damsm, model: &ModelConfig, epoch: u64) -> Result<Checkpoint> {
    let config_json = serde_json::to_string(&SavedConfig { model: model.clone(), train: None })?;
    Ok(Checkpoint {
        kind: CheckpointKind::Damsm,
        epoch,
        config_json,
        tensors: export_params(damsm),
    })
}

pub fn restore_damsm(checkpoint: &Checkpoint) -> Result<(ModelConfig, Damsm)> {
    if checkpoint.kind != CheckpointKind::Damsm {
        return Err(Error::InvalidArgument("not a matching-model checkpoint".into()));
    }
    let saved: SavedConfig = serde_json::from_str(&checkpoint.config_json)?;
    saved.model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut damsm = Damsm::new(&saved.model, &mut rng);
    import_params(&mut damsm, &checkpoint.tensors)?;
    Ok((saved.model, damsm))
}
