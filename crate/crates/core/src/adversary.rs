//! Per-stage discriminators scoring images unconditionally and conditioned on
//! the sentence vector.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{prefixed, prefixed_mut, Conv2d, Linear, Module, Param, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Side of the trunk's final feature map.
pub const TRUNK_SIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorOutput {
    pub uncond_logit: f64,
    pub cond_logit: f64,
}

impl DiscriminatorOutput {
    pub fn uncond_probability(&self) -> f64 {
        logistic(self.uncond_logit)
    }

    pub fn cond_probability(&self) -> f64 {
        logistic(self.cond_logit)
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub resolution: usize,
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub uncond_head: Linear,
    pub joint: Conv2d,
    pub cond_head: Linear,
}

impl Discriminator {
    pub fn new(resolution: usize, disc_dim: usize, text_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(
            resolution >= TRUNK_SIDE && resolution.is_power_of_two(),
            "discriminator resolution {resolution} must be a power of two >= {TRUNK_SIDE}"
        );
        let depth = (resolution / TRUNK_SIDE).trailing_zeros() as usize;
        let flat = disc_dim * TRUNK_SIDE * TRUNK_SIDE;
        Self {
            resolution,
            stem: Conv2d::new(3, disc_dim, 3, 1, rng),
            down: (0..depth).map(|_| Conv2d::new(disc_dim, disc_dim, 3, 2, rng)).collect(),
            uncond_head: Linear::new(flat, 1, rng),
            joint: Conv2d::new(disc_dim + text_dim, disc_dim, 3, 1, rng),
            cond_head: Linear::new(flat, 1, rng),
        }
    }

    /// One discriminator per stage, matching each stage's resolution.
    pub fn for_stages(cfg: &ModelConfig, rng: &mut impl Rng) -> Vec<Self> {
        (0..cfg.stages)
            .map(|i| Self::new(cfg.stage_resolution(i), cfg.disc_dim, cfg.text_dim, rng))
            .collect()
    }

    pub fn text_dim(&self) -> usize {
        self.joint.weight.value.shape()[1] - self.stem.out_channels()
    }

    /// `image [N, 3, R, R]` → trunk features `[N, D, 4, 4]`.
    pub fn trunk(&self, g: &Graph, image: Var) -> Var {
        let x = g.leaky_relu(self.stem.forward(g, image), LEAKY_SLOPE);
        self.down.iter().fold(x, |x, c| g.leaky_relu(c.forward(g, x), LEAKY_SLOPE))
    }

    pub fn uncond_logits(&self, g: &Graph, features: Var) -> Var {
        let n = g.shape(features)[0];
        let flat = g.reshape(features, &[n, self.uncond_head.input_dim()]);
        g.reshape(self.uncond_head.forward(g, flat), &[n])
    }

    /// `sentence [N, text_dim]` is replicated over the 4×4 grid and joined with the trunk features.
    pub fn cond_logits(&self, g: &Graph, features: Var, sentence: Var) -> Var {
        let n = g.shape(features)[0];
        let d = g.shape(sentence)[1];
        let tiled = g.reshape(g.expand_last(sentence, TRUNK_SIDE * TRUNK_SIDE), &[n, d, TRUNK_SIDE, TRUNK_SIDE]);
        let x = g.leaky_relu(self.joint.forward(g, g.concat(&[features, tiled], 1)), LEAKY_SLOPE);
        let flat = g.reshape(x, &[n, self.cond_head.input_dim()]);
        g.reshape(self.cond_head.forward(g, flat), &[n])
    }

    /// `(uncond [N], cond [N])` logits.
    pub fn forward(&self, g: &Graph, image: Var, sentence: Var) -> Result<(Var, Var)> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Shape(format!("discriminator input must be [N, 3, R, R], got {s:?}")));
        }
        if s[2] != self.resolution || s[3] != self.resolution {
            return Err(Error::Resolution { expected: self.resolution, actual: s[2] });
        }
        let ss = g.shape(sentence);
        if ss != [s[0], self.text_dim()] {
            return Err(Error::Shape(format!("sentence {ss:?} for batch {} of width {}", s[0], self.text_dim())));
        }
        let f = self.trunk(g, image);
        Ok((self.uncond_logits(g, f), self.cond_logits(g, f, sentence)))
    }
}

impl Module for Discriminator {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("stem", self.stem.named_params());
        for (i, c) in self.down.iter().enumerate() {
            v.extend(prefixed(&format!("down.{i}"), c.named_params()));
        }
        v.extend(prefixed("uncond_head", self.uncond_head.named_params()));
        v.extend(prefixed("joint", self.joint.named_params()));
        v.extend(prefixed("cond_head", self.cond_head.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("stem", self.stem.named_params_mut());
        for (i, c) in self.down.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("down.{i}"), c.named_params_mut()));
        }
        v.extend(prefixed_mut("uncond_head", self.uncond_head.named_params_mut()));
        v.extend(prefixed_mut("joint", self.joint.named_params_mut()));
        v.extend(prefixed_mut("cond_head", self.cond_head.named_params_mut()));
        v
    }
}

/// All stage discriminators as one module, for checkpointing and optimisation.
#[derive(Clone, Debug)]
pub struct DiscriminatorStack(pub Vec<Discriminator>);

impl Module for DiscriminatorStack {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.0
            .iter()
            .enumerate()
            .flat_map(|(i, d)| prefixed(&format!("{i}"), d.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.0
            .iter_mut()
            .enumerate()
            .flat_map(|(i, d)| prefixed_mut(&format!("{i}"), d.named_params_mut()))
            .collect()
    }
}

/// Score one `[3, R, R]` image against one sentence vector.
pub fn discriminate(image: &Tensor, sentence_vector: &Tensor, disc: &Discriminator) -> Result<DiscriminatorOutput> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("image must be [3, R, R], got {s:?}")));
    }
    let g = Graph::new();
    let x = g.constant(image.clone().reshape(&[1, s[0], s[1], s[2]]));
    let c = g.constant(sentence_vector.clone().reshape(&[1, sentence_vector.len()]));
    let (u, cl) = disc.forward(&g, x, c)?;
    let out = DiscriminatorOutput {
        uncond_logit: g.item(u),
        cond_logit: g.item(cl),
    };
    if !out.uncond_logit.is_finite() || !out.cond_logit.is_finite() {
        return Err(Error::NonFinite("discriminator logits".into()));
    }
    Ok(out)
}
