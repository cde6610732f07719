//! Image/text matching: a small convolutional image encoder, word- and
//! sentence-level matching losses, pretraining and retrieval precision.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{prefixed, prefixed_mut, Adam, AdamConfig, Conv2d, Linear, Module, Param, LEAKY_SLOPE};
use crate::tensor::Tensor;
use crate::text::{Caption, TextEncoder, TextEncoding};

pub const NORM_FLOOR: f64 = 1e-8;

/// Attention, aggregation and posterior temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gammas {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Self {
            gamma1: 5.0,
            gamma2: 5.0,
            gamma3: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    /// `[text_dim, regions]`.
    pub region_features: Tensor,
    /// `[text_dim]`.
    pub global_feature: Tensor,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub resolution: usize,
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub region_projection: Conv2d,
    pub global_projection: Linear,
}

impl ImageEncoder {
    pub fn new(resolution: usize, region_grid: usize, channels: usize, text_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(
            region_grid > 0 && resolution.is_multiple_of(region_grid) && (resolution / region_grid).is_power_of_two(),
            "resolution {resolution} must be a power-of-two multiple of the region grid {region_grid}"
        );
        let depth = (resolution / region_grid).trailing_zeros() as usize;
        Self {
            resolution,
            stem: Conv2d::new(3, channels, 3, 1, rng),
            down: (0..depth).map(|_| Conv2d::new(channels, channels, 3, 2, rng)).collect(),
            region_projection: Conv2d::new(channels, text_dim, 1, 1, rng),
            global_projection: Linear::new(channels, text_dim, rng),
        }
    }

    pub fn region_grid(&self) -> usize {
        self.resolution >> self.down.len()
    }

    /// `image [N, 3, R, R]` → `(regions [N, text_dim, G*G], global [N, text_dim])`.
    pub fn forward(&self, g: &Graph, image: Var) -> Result<(Var, Var)> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("image batch must be [N, 3, R, R], got {s:?}")));
        }
        if s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::Resolution { expected: self.resolution, actual: s[2] });
        }
        let n = s[0];
        let x = g.leaky_relu(self.stem.forward(g, image), LEAKY_SLOPE);
        let x = self.down.iter().fold(x, |x, c| g.leaky_relu(c.forward(g, x), LEAKY_SLOPE));
        let grid = self.region_grid();
        let cells = grid * grid;
        let regions = g.reshape(self.region_projection.forward(g, x), &[n, self.global_projection.output_dim(), cells]);
        let channels = g.shape(x)[1];
        let pooled = g.scale(g.sum_last(g.reshape(x, &[n, channels, cells])), 1.0 / cells as f64);
        let global = self.global_projection.forward(g, pooled);
        Ok((regions, global))
    }
}

impl Module for ImageEncoder {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("stem", self.stem.named_params());
        for (i, c) in self.down.iter().enumerate() {
            v.extend(prefixed(&format!("down.{i}"), c.named_params()));
        }
        v.extend(prefixed("region_projection", self.region_projection.named_params()));
        v.extend(prefixed("global_projection", self.global_projection.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("stem", self.stem.named_params_mut());
        for (i, c) in self.down.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("down.{i}"), c.named_params_mut()));
        }
        v.extend(prefixed_mut("region_projection", self.region_projection.named_params_mut()));
        v.extend(prefixed_mut("global_projection", self.global_projection.named_params_mut()));
        v
    }
}

/// Text and image encoders trained jointly on matching pairs.
#[derive(Clone, Debug)]
pub struct Damsm {
    pub text: TextEncoder,
    pub image: ImageEncoder,
}

impl Damsm {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self {
            text: TextEncoder::new(cfg.vocab_size, cfg.embed_dim, cfg.text_dim, rng),
            image: ImageEncoder::new(cfg.final_resolution(), cfg.region_grid, cfg.damsm_channels, cfg.text_dim, rng),
        }
    }
}

impl Module for Damsm {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("text", self.text.named_params());
        v.extend(prefixed("image", self.image.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("text", self.text.named_params_mut());
        v.extend(prefixed_mut("image", self.image.named_params_mut()));
        v
    }
}

pub fn encode_image(image: &Tensor, encoder: &ImageEncoder) -> Result<ImageEncoding> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("image must be [3, R, R], got {s:?}")));
    }
    let g = Graph::new();
    let x = g.constant(image.clone().reshape(&[1, s[0], s[1], s[2]]));
    let (regions, global) = encoder.forward(&g, x)?;
    let r = g.value(regions);
    let (d, cells) = (r.shape()[1], r.shape()[2]);
    Ok(ImageEncoding {
        region_features: r.reshape(&[d, cells]),
        global_feature: g.value(global).reshape(&[d]),
    })
}

/// Word-level matching score in the graph. `regions [D, R]`, `words [T, D]` → scalar.
///
/// Region attention uses unit word directions, so rescaling a word leaves the score unchanged.
pub fn matching_score_graph(g: &Graph, regions: Var, words: Var, gamma1: f64, gamma2: f64) -> Var {
    let unit = g.normalize_rows(words, NORM_FLOOR);
    let alpha = g.softmax(g.scale(g.matmul(unit, regions), gamma1));
    let context = g.matmul(alpha, g.transpose(regions));
    let rel = g.sum_last(g.mul(g.normalize_rows(context, NORM_FLOOR), unit));
    let t = g.shape(words)[0];
    let rel = g.reshape(rel, &[t]);
    g.scale(g.logsumexp(g.scale(rel, gamma2)), 1.0 / gamma2)
}

pub fn matching_score(image: &ImageEncoding, text: &TextEncoding, gamma1: f64, gamma2: f64) -> Result<f64> {
    let (di, dt) = (image.region_features.shape()[0], text.word_features.shape()[0]);
    if di != dt {
        return Err(Error::Shape(format!("image width {di} vs text width {dt}")));
    }
    if text.word_features.shape()[1] == 0 {
        return Err(Error::EmptyCaption);
    }
    let g = Graph::new();
    let regions = g.constant(image.region_features.clone());
    let words = g.constant(text.word_features.transpose());
    Ok(g.item(matching_score_graph(&g, regions, words, gamma1, gamma2)))
}

/// `−Σ_b log softmax_rows(γ3 S)[b, b] − Σ_b log softmax_cols(γ3 S)[b, b]` in the graph.
pub fn batch_matching_loss_graph(g: &Graph, scores: Var, gamma3: f64) -> Var {
    let b = g.shape(scores)[0];
    let eye = g.constant(Tensor::eye(b));
    let scaled = g.scale(scores, gamma3);
    let rows = g.sum(g.mul(g.log_softmax(scaled), eye));
    let cols = g.sum(g.mul(g.log_softmax(g.transpose(scaled)), eye));
    g.neg(g.add(rows, cols))
}

fn check_square(scores: &Tensor) -> Result<usize> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape(format!("score matrix must be square, got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::Empty("batch"));
    }
    Ok(s[0])
}

/// Matching loss for a `[B, B]` score matrix; `scores[i][j]` pairs image `i` with caption `j`.
pub fn batch_matching_loss(scores: &Tensor, gamma3: f64) -> Result<f64> {
    check_square(scores)?;
    let g = Graph::new();
    let s = g.constant(scores.clone());
    Ok(g.item(batch_matching_loss_graph(&g, s, gamma3)))
}

/// Caption posteriors per image (rows) and image posteriors per caption (rows of the transposed matrix).
pub fn posteriors(scores: &Tensor, gamma3: f64) -> Result<(Tensor, Tensor)> {
    check_square(scores)?;
    let g = Graph::new();
    let s = g.scale(g.constant(scores.clone()), gamma3);
    Ok((g.value(g.softmax(s)), g.value(g.softmax(g.transpose(s)))))
}

/// Graph handles of one batch evaluation.
pub struct DamsmTerms {
    pub total: Var,
    pub word: Var,
    pub sentence: Var,
    /// `[B, B]` word-level scores.
    pub word_scores: Var,
    /// `[B, B]` sentence-level cosines.
    pub sentence_scores: Var,
}

/// Batch loss with both encoders in the graph; `images [B, 3, R, R]`.
pub fn damsm_terms(g: &Graph, model: &Damsm, images: Var, captions: &[Caption], gammas: Gammas) -> Result<DamsmTerms> {
    let b = captions.len();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if g.shape(images)[0] != b {
        return Err(Error::Shape(format!("{} images for {b} captions", g.shape(images)[0])));
    }
    let (regions, global) = model.image.forward(g, images)?;
    let d = g.shape(regions)[1];
    let cells = g.shape(regions)[2];
    let mut words = Vec::with_capacity(b);
    let mut sentences = Vec::with_capacity(b);
    for c in captions {
        let (w, s) = model.text.encode_graph(g, c)?;
        words.push(w);
        sentences.push(s);
    }
    let region_list: Vec<Var> = (0..b).map(|i| g.reshape(g.narrow(regions, 0, i, 1), &[d, cells])).collect();
    let mut cells_out = Vec::with_capacity(b * b);
    for r in &region_list {
        for w in &words {
            cells_out.push(g.reshape(matching_score_graph(g, *r, *w, gammas.gamma1, gammas.gamma2), &[1]));
        }
    }
    let word_scores = g.reshape(g.concat(&cells_out, 0), &[b, b]);
    let sent = g.concat(&sentences, 0);
    let sentence_scores = g.matmul(g.normalize_rows(global, NORM_FLOOR), g.transpose(g.normalize_rows(sent, NORM_FLOOR)));
    let word = batch_matching_loss_graph(g, word_scores, gammas.gamma3);
    let sentence = batch_matching_loss_graph(g, sentence_scores, gammas.gamma3);
    Ok(DamsmTerms {
        total: g.add(word, sentence),
        word,
        sentence,
        word_scores,
        sentence_scores,
    })
}

pub fn damsm_loss(images: &[Tensor], captions: &[Caption], model: &Damsm, gammas: Gammas) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let g = Graph::new();
    let x = g.constant(Tensor::stack(images));
    let terms = damsm_terms(&g, model, x, captions, gammas)?;
    Ok(g.item(terms.total))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub gammas: Gammas,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 14,
            adam: AdamConfig {
                learning_rate: 2e-3,
                ..AdamConfig::default()
            },
            gammas: Gammas::default(),
            seed: 0,
        }
    }
}

/// Mean batch loss per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Minimise the matching loss over `(image [3, R, R], caption)` pairs.
pub fn pretrain_damsm(data: &[(Tensor, Caption)], model: &mut Damsm, config: &PretrainConfig) -> Result<PretrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("pretraining dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.adam, model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = PretrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<Tensor> = chunk.iter().map(|&i| data[i].0.clone()).collect();
            let captions: Vec<Caption> = chunk.iter().map(|&i| data[i].1.clone()).collect();
            let g = Graph::new();
            let x = g.constant(Tensor::stack(&images));
            let terms = damsm_terms(&g, model, x, &captions, config.gammas)?;
            let loss = g.item(terms.total);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi, term: "damsm".into() });
            }
            let grads = g.backward(terms.total);
            adam.update(model, &grads);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("damsm epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

/// Fraction of queries whose true candidate outranks `k − 1` random distractors.
///
/// `scores[q][c]` scores query `q` against candidate `c`; query `q`'s true candidate is `c = q`.
/// Candidates sharing the true candidate's `key` are never drawn as distractors. Ties favour the
/// true candidate.
pub fn r_precision_from_scores<K: PartialEq>(scores: &Tensor, keys: &[K], k: usize, rng: &mut impl Rng) -> Result<f64> {
    let n = check_square(scores)?;
    if keys.len() != n {
        return Err(Error::Shape(format!("{} keys for {n} candidates", keys.len())));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    let mut hits = 0;
    for q in 0..n {
        let pool: Vec<usize> = (0..n).filter(|&c| keys[c] != keys[q]).collect();
        if pool.len() < k - 1 {
            return Err(Error::InvalidArgument(format!(
                "query {q} has {} distinct distractors, needs {}",
                pool.len(),
                k - 1
            )));
        }
        let row = &scores.data()[q * n..(q + 1) * n];
        let truth = row[q];
        if pool.choose_multiple(rng, k - 1).all(|&c| row[c] <= truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Sentence-level cosine matrix between every image and every caption.
pub fn sentence_scores(images: &[Tensor], captions: &[Caption], model: &Damsm) -> Result<Tensor> {
    if images.len() != captions.len() {
        return Err(Error::Shape(format!("{} images vs {} captions", images.len(), captions.len())));
    }
    if images.is_empty() {
        return Err(Error::Empty("retrieval set"));
    }
    let g = Graph::new();
    let (_, global) = model.image.forward(&g, g.constant(Tensor::stack(images)))?;
    let mut sents = Vec::with_capacity(captions.len());
    for c in captions {
        sents.push(model.text.encode_graph(&g, c)?.1);
    }
    let s = g.concat(&sents, 0);
    let m = g.matmul(g.normalize_rows(global, NORM_FLOOR), g.transpose(g.normalize_rows(s, NORM_FLOOR)));
    Ok(g.value(m))
}

/// R-precision of images retrieving their captions by sentence-level cosine.
pub fn r_precision(images: &[Tensor], captions: &[Caption], model: &Damsm, k: usize, rng: &mut impl Rng) -> Result<f64> {
    if k > images.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} candidates", images.len())));
    }
    let scores = sentence_scores(images, captions, model)?;
    let keys: Vec<&[usize]> = captions.iter().map(|c| c.tokens()).collect();
    r_precision_from_scores(&scores, &keys, k, rng)
}
