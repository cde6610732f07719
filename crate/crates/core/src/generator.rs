//! The stacked attentional generator with per-stage pattern editors.
//!
//! Stage 0 maps the augmented condition and noise to a hidden map at the base
//! resolution. Each later stage attends over the words from the previous
//! hidden map, refines and doubles the resolution. Every stage renders a
//! pre-edit image, which its editor fuses with the template pattern at the
//! same resolution to emit the edited image.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::config::{ModelConfig, NoiseDistribution};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imaging::{area_resize, image_to_tensor};
use crate::nn::{normal_tensor, prefixed, prefixed_mut, Conv2d, Linear, Module, Param, LEAKY_SLOPE};
use crate::tensor::Tensor;
use crate::text::{AugmentedCondition, CondAugment, TextEncoding};

/// One template rendered at every stage resolution, pixels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternPyramid {
    pub levels: Vec<Tensor>,
    pub cluster_id: usize,
    pub source_path: String,
}

impl PatternPyramid {
    pub fn stages(&self) -> usize {
        self.levels.len()
    }

    pub fn resolution(&self, stage: usize) -> usize {
        self.levels[stage].shape()[1]
    }
}

/// Area-average `template [3, H, W]` (values in `[-1, 1]`) down to each stage resolution.
pub fn build_pattern_pyramid_from_tensor(
    template: &Tensor,
    stages: usize,
    base_resolution: usize,
    cluster_id: usize,
    source_path: &str,
) -> Result<PatternPyramid> {
    let s = template.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("template must be [3, H, W], got {s:?}")));
    }
    if stages == 0 {
        return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
    }
    let top = base_resolution << (stages - 1);
    let side = s[1].min(s[2]);
    if side < top {
        return Err(Error::Resolution { expected: top, actual: side });
    }
    let levels = (0..stages)
        .map(|i| {
            let r = base_resolution << i;
            area_resize(template, r, r).map(|v| v.clamp(-1.0, 1.0))
        })
        .collect();
    Ok(PatternPyramid {
        levels,
        cluster_id,
        source_path: source_path.to_string(),
    })
}

pub fn build_pattern_pyramid(
    template: &image::RgbImage,
    stages: usize,
    base_resolution: usize,
    cluster_id: usize,
    source_path: &str,
) -> Result<PatternPyramid> {
    build_pattern_pyramid_from_tensor(&image_to_tensor(template), stages, base_resolution, cluster_id, source_path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector {
    pub z: Tensor,
}

impl NoiseVector {
    pub fn sample(dim: usize, dist: NoiseDistribution, rng: &mut impl Rng) -> Self {
        let z = match dist {
            NoiseDistribution::Uniform => {
                let u = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");
                Tensor::from_fn(&[dim], |_| u.sample(rng))
            }
            NoiseDistribution::Gaussian => Tensor::from_fn(&[dim], |_| StandardNormal.sample(rng)),
        };
        Self { z }
    }
}

/// Per-stage intermediates for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs {
    /// `h_i`, `[hidden_dim, R_i, R_i]`.
    pub hidden: Vec<Tensor>,
    /// Image-head outputs before editing, `[3, R_i, R_i]`.
    pub pre_edit: Vec<Tensor>,
    /// Editor outputs, `[3, R_i, R_i]`.
    pub edited: Vec<Tensor>,
    /// Word attention `[T, R_j^2]` computed over `h_j` and consumed by stage `j + 1`.
    pub attention_maps: Vec<Tensor>,
}

/// Graph handles for a batch pass through the generator.
pub struct StageVars {
    pub hidden: Vec<Var>,
    pub pre_edit: Vec<Var>,
    pub edited: Vec<Var>,
    /// `attention[j][n]` is sample `n`'s map over `h_j`.
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct InitialStage {
    pub fc: Linear,
    pub conv: Conv2d,
    pub resolution: usize,
}

impl InitialStage {
    fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let r = cfg.base_resolution;
        Self {
            fc: Linear::new(cfg.cond_dim + cfg.noise_dim, cfg.hidden_dim * r * r, rng),
            conv: Conv2d::new(cfg.hidden_dim, cfg.hidden_dim, 3, 1, rng),
            resolution: r,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.conv.out_channels()
    }

    /// `c [N, cond]`, `z [N, noise]` → `h_0 [N, hidden, R_0, R_0]`.
    pub fn forward(&self, g: &Graph, c: Var, z: Var) -> Var {
        let n = g.shape(c)[0];
        let r = self.resolution;
        let x = g.leaky_relu(self.fc.forward(g, g.concat(&[c, z], 1)), LEAKY_SLOPE);
        let x = g.reshape(x, &[n, self.hidden_dim(), r, r]);
        g.leaky_relu(self.conv.forward(g, x), LEAKY_SLOPE)
    }
}

impl Module for InitialStage {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("fc", self.fc.named_params());
        v.extend(prefixed("conv", self.conv.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("fc", self.fc.named_params_mut());
        v.extend(prefixed_mut("conv", self.conv.named_params_mut()));
        v
    }
}

/// Word-context attention: projects word features into the hidden space and
/// softmaxes word/location similarities over the words at each location.
#[derive(Clone, Debug)]
pub struct WordAttention {
    pub projection: Param,
}

impl WordAttention {
    fn new(text_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / text_dim as f64).sqrt();
        Self {
            projection: Param::new(normal_tensor(&[text_dim, hidden_dim], std, rng)),
        }
    }

    /// `words [T, text_dim]`, `hidden [hidden_dim, L]` → `(context [hidden_dim, L], weights [T, L])`.
    pub fn forward(&self, g: &Graph, words: Var, hidden: Var) -> (Var, Var) {
        let proj = g.param(&self.projection);
        let e = g.matmul(words, proj);
        let scores_t = g.matmul(g.transpose(hidden), g.transpose(e));
        let weights_t = g.softmax(scores_t);
        let weights = g.transpose(weights_t);
        let context = g.matmul(g.transpose(e), weights);
        (context, weights)
    }
}

impl Module for WordAttention {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("projection".into(), &self.projection)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("projection".into(), &mut self.projection)]
    }
}

/// Joins hidden map and word context, applies a residual block and doubles the resolution.
#[derive(Clone, Debug)]
pub struct RefineStage {
    pub joint: Conv2d,
    pub res_a: Conv2d,
    pub res_b: Conv2d,
    pub up: Conv2d,
}

impl RefineStage {
    fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            joint: Conv2d::new(2 * hidden, hidden, 3, 1, rng),
            res_a: Conv2d::new(hidden, hidden, 3, 1, rng),
            res_b: Conv2d::new(hidden, hidden, 3, 1, rng),
            up: Conv2d::new(hidden, hidden, 3, 1, rng),
        }
    }

    pub fn forward(&self, g: &Graph, h_prev: Var, context: Var) -> Var {
        let x = g.leaky_relu(self.joint.forward(g, g.concat(&[h_prev, context], 1)), LEAKY_SLOPE);
        let r = g.leaky_relu(self.res_a.forward(g, x), LEAKY_SLOPE);
        let x = g.add(x, self.res_b.forward(g, r));
        g.leaky_relu(self.up.forward(g, g.upsample2x(x)), LEAKY_SLOPE)
    }
}

impl Module for RefineStage {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("joint", self.joint.named_params());
        v.extend(prefixed("res_a", self.res_a.named_params()));
        v.extend(prefixed("res_b", self.res_b.named_params()));
        v.extend(prefixed("up", self.up.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("joint", self.joint.named_params_mut());
        v.extend(prefixed_mut("res_a", self.res_a.named_params_mut()));
        v.extend(prefixed_mut("res_b", self.res_b.named_params_mut()));
        v.extend(prefixed_mut("up", self.up.named_params_mut()));
        v
    }
}

/// 3×3 convolution to RGB followed by `tanh`.
#[derive(Clone, Debug)]
pub struct ImageHead {
    pub conv: Conv2d,
}

impl ImageHead {
    fn new(hidden: usize, rng: &mut impl Rng) -> Self {
        Self { conv: Conv2d::new(hidden, 3, 3, 1, rng) }
    }

    pub fn forward(&self, g: &Graph, h: Var) -> Var {
        g.tanh(self.conv.forward(g, h))
    }
}

impl Module for ImageHead {
    fn named_params(&self) -> Vec<(String, &Param)> {
        prefixed("conv", self.conv.named_params())
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        prefixed_mut("conv", self.conv.named_params_mut())
    }
}

/// The editing component: both the stage image and the pattern are
/// down-sampled 4× to `[edit_dim, R/4, R/4]`, concatenated, fused by a
/// per-location MLP (1×1 convolutions) and up-sampled back to `R`.
#[derive(Clone, Debug)]
pub struct PatternEditor {
    pub image_down: [Conv2d; 2],
    pub pattern_down: [Conv2d; 2],
    pub fuse: [Conv2d; 2],
    pub up: [Conv2d; 2],
    pub out: Conv2d,
}

impl PatternEditor {
    fn new(edit: usize, rng: &mut impl Rng) -> Self {
        let down = |rng: &mut _| [Conv2d::new(3, edit, 3, 2, rng), Conv2d::new(edit, edit, 3, 2, rng)];
        let image_down = down(rng);
        let pattern_down = down(rng);
        Self {
            image_down,
            pattern_down,
            fuse: [Conv2d::new(2 * edit, edit, 1, 1, rng), Conv2d::new(edit, edit, 1, 1, rng)],
            up: [Conv2d::new(edit, edit, 3, 1, rng), Conv2d::new(edit, edit, 3, 1, rng)],
            out: Conv2d::new(edit, 3, 3, 1, rng),
        }
    }

    fn down(g: &Graph, convs: &[Conv2d; 2], x: Var) -> Var {
        convs.iter().fold(x, |x, c| g.leaky_relu(c.forward(g, x), LEAKY_SLOPE))
    }

    /// `image`, `pattern`: `[N, 3, R, R]` → edited `[N, 3, R, R]`.
    pub fn forward(&self, g: &Graph, image: Var, pattern: Var) -> Var {
        let a = Self::down(g, &self.image_down, image);
        let b = Self::down(g, &self.pattern_down, pattern);
        let mut x = g.concat(&[a, b], 1);
        for c in &self.fuse {
            x = g.leaky_relu(c.forward(g, x), LEAKY_SLOPE);
        }
        for c in &self.up {
            x = g.leaky_relu(c.forward(g, g.upsample2x(x)), LEAKY_SLOPE);
        }
        g.tanh(self.out.forward(g, x))
    }
}

impl Module for PatternEditor {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = Vec::new();
        for (name, group) in [
            ("image_down", &self.image_down),
            ("pattern_down", &self.pattern_down),
            ("fuse", &self.fuse),
            ("up", &self.up),
        ] {
            for (i, c) in group.iter().enumerate() {
                v.extend(prefixed(&format!("{name}.{i}"), c.named_params()));
            }
        }
        v.extend(prefixed("out", self.out.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        for (name, group) in [
            ("image_down", &mut self.image_down),
            ("pattern_down", &mut self.pattern_down),
            ("fuse", &mut self.fuse),
            ("up", &mut self.up),
        ] {
            for (i, c) in group.iter_mut().enumerate() {
                v.extend(prefixed_mut(&format!("{name}.{i}"), c.named_params_mut()));
            }
        }
        v.extend(prefixed_mut("out", self.out.named_params_mut()));
        v
    }
}

/// Conditioning augmentation plus the full stage stack.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cond: CondAugment,
    pub initial: InitialStage,
    pub attention: Vec<WordAttention>,
    pub refine: Vec<RefineStage>,
    pub heads: Vec<ImageHead>,
    pub editors: Vec<PatternEditor>,
}

impl Generator {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let m = cfg.stages;
        Self {
            cond: CondAugment::new(cfg.text_dim, cfg.cond_dim, rng),
            initial: InitialStage::new(cfg, rng),
            attention: (1..m).map(|_| WordAttention::new(cfg.text_dim, cfg.hidden_dim, rng)).collect(),
            refine: (1..m).map(|_| RefineStage::new(cfg.hidden_dim, rng)).collect(),
            heads: (0..m).map(|_| ImageHead::new(cfg.hidden_dim, rng)).collect(),
            editors: (0..m).map(|_| PatternEditor::new(cfg.edit_dim, rng)).collect(),
        }
    }

    pub fn stages(&self) -> usize {
        self.heads.len()
    }

    pub fn base_resolution(&self) -> usize {
        self.initial.resolution
    }

    /// Attend per sample: `words[n] [T_n, text]` over `hidden [N, D, R, R]`.
    pub fn attend_batch(&self, g: &Graph, stage: usize, words: &[Var], hidden: Var) -> (Var, Vec<Var>) {
        let s = g.shape(hidden);
        let (n, d, r) = (s[0], s[1], s[2]);
        let mut contexts = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for (i, w) in words.iter().enumerate() {
            let h = g.reshape(g.narrow(hidden, 0, i, 1), &[d, r * r]);
            let (ctx, weights) = self.attention[stage].forward(g, *w, h);
            contexts.push(g.reshape(ctx, &[1, d, r, r]));
            maps.push(weights);
        }
        (g.concat(&contexts, 0), maps)
    }

    /// Batch forward. `c [N, cond]`, `z [N, noise]`, `words` per sample,
    /// `patterns[i] [N, 3, R_i, R_i]`.
    pub fn forward(&self, g: &Graph, c: Var, z: Var, words: &[Var], patterns: &[Var]) -> Result<StageVars> {
        let m = self.stages();
        if patterns.len() != m {
            return Err(Error::InvalidArgument(format!("{} pattern levels for {m} stages", patterns.len())));
        }
        let n = g.shape(c)[0];
        if words.len() != n {
            return Err(Error::Shape(format!("{} word sets for batch of {n}", words.len())));
        }
        let mut out = StageVars {
            hidden: Vec::with_capacity(m),
            pre_edit: Vec::with_capacity(m),
            edited: Vec::with_capacity(m),
            attention: Vec::with_capacity(m.saturating_sub(1)),
        };
        let mut h = self.initial.forward(g, c, z);
        for i in 0..m {
            if i > 0 {
                let (ctx, maps) = self.attend_batch(g, i - 1, words, h);
                out.attention.push(maps);
                h = self.refine[i - 1].forward(g, h, ctx);
            }
            let r = g.shape(h)[2];
            let pr = g.shape(patterns[i]);
            if pr[2] != r {
                return Err(Error::Resolution { expected: r, actual: pr[2] });
            }
            let pre = self.heads[i].forward(g, h);
            let edited = self.editors[i].forward(g, pre, patterns[i]);
            out.hidden.push(h);
            out.pre_edit.push(pre);
            out.edited.push(edited);
        }
        Ok(out)
    }
}

impl Module for Generator {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = prefixed("cond", self.cond.named_params());
        v.extend(prefixed("initial", self.initial.named_params()));
        for (i, a) in self.attention.iter().enumerate() {
            v.extend(prefixed(&format!("attention.{}", i + 1), a.named_params()));
        }
        for (i, r) in self.refine.iter().enumerate() {
            v.extend(prefixed(&format!("refine.{}", i + 1), r.named_params()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            v.extend(prefixed(&format!("head.{i}"), h.named_params()));
        }
        for (i, e) in self.editors.iter().enumerate() {
            v.extend(prefixed(&format!("editor.{i}"), e.named_params()));
        }
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = prefixed_mut("cond", self.cond.named_params_mut());
        v.extend(prefixed_mut("initial", self.initial.named_params_mut()));
        for (i, a) in self.attention.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("attention.{}", i + 1), a.named_params_mut()));
        }
        for (i, r) in self.refine.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("refine.{}", i + 1), r.named_params_mut()));
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("head.{i}"), h.named_params_mut()));
        }
        for (i, e) in self.editors.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("editor.{i}"), e.named_params_mut()));
        }
        v
    }
}

fn batch1(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// `h_0 [hidden, R_0, R_0]` for one sample.
pub fn initial_stage(cond: &AugmentedCondition, z: &NoiseVector, generator: &Generator) -> Result<Tensor> {
    check_finite(&cond.c, "condition")?;
    check_finite(&z.z, "noise")?;
    let g = Graph::new();
    let c = g.constant(cond.c.clone().reshape(&[1, cond.c.len()]));
    let zv = g.constant(z.z.clone().reshape(&[1, z.z.len()]));
    let h = generator.initial.forward(&g, c, zv);
    Ok(g.value(h).select(0))
}

/// Word attention over one hidden map. `word_features [text_dim, T]`,
/// `hidden [hidden_dim, L]` → `(context [hidden_dim, L], weights [T, L])`.
pub fn attend(word_features: &Tensor, hidden: &Tensor, attention: &WordAttention) -> Result<(Tensor, Tensor)> {
    let ws = word_features.shape();
    if ws.len() != 2 || ws[1] == 0 {
        return Err(Error::EmptyCaption);
    }
    let proj = attention.projection.value.shape();
    if ws[0] != proj[0] || hidden.ndim() != 2 || hidden.shape()[0] != proj[1] {
        return Err(Error::Shape(format!(
            "words {ws:?} / hidden {:?} incompatible with projection {proj:?}",
            hidden.shape()
        )));
    }
    let g = Graph::new();
    let w = g.constant(word_features.transpose());
    let h = g.constant(hidden.clone());
    let (ctx, weights) = attention.forward(&g, w, h);
    Ok((g.value(ctx), g.value(weights)))
}

/// One refinement step `i ≥ 1`: `(h_i, x̂_i)` from `h_{i-1}` and its word context.
pub fn next_stage(h_prev: &Tensor, context: &Tensor, stage: usize, generator: &Generator) -> Result<(Tensor, Tensor)> {
    if stage == 0 || stage >= generator.stages() {
        return Err(Error::InvalidArgument(format!("refinement stage {stage} out of 1..{}", generator.stages())));
    }
    let expected = generator.base_resolution() << (stage - 1);
    let r = h_prev.shape().get(1).copied().unwrap_or(0);
    if r != expected {
        return Err(Error::Resolution { expected, actual: r });
    }
    if context.shape() != h_prev.shape() {
        return Err(Error::Shape(format!("context {:?} vs hidden {:?}", context.shape(), h_prev.shape())));
    }
    let g = Graph::new();
    let h = g.constant(batch1(h_prev));
    let ctx = g.constant(batch1(context));
    let hn = generator.refine[stage - 1].forward(&g, h, ctx);
    let x = generator.heads[stage].forward(&g, hn);
    Ok((g.value(hn).select(0), g.value(x).select(0)))
}

/// Fuse a stage image with its pattern level; both `[3, R, R]`.
pub fn edit_with_pattern(image: &Tensor, pattern: &Tensor, editor: &PatternEditor) -> Result<Tensor> {
    if image.shape() != pattern.shape() {
        let (a, b) = (image.shape().get(1).copied().unwrap_or(0), pattern.shape().get(1).copied().unwrap_or(0));
        return Err(Error::Resolution { expected: a, actual: b });
    }
    let r = image.shape()[1];
    if !r.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!("resolution {r} is not divisible by 4")));
    }
    let g = Graph::new();
    let x = g.constant(batch1(image));
    let p = g.constant(batch1(pattern));
    Ok(g.value(editor.forward(&g, x, p)).select(0))
}

/// Full single-sample generation.
pub fn generate(
    cond: &AugmentedCondition,
    z: &NoiseVector,
    text: &TextEncoding,
    pyramid: &PatternPyramid,
    generator: &Generator,
) -> Result<StageOutputs> {
    check_finite(&cond.c, "condition")?;
    check_finite(&z.z, "noise")?;
    if pyramid.stages() != generator.stages() {
        return Err(Error::InvalidArgument(format!(
            "pyramid has {} levels, generator {} stages",
            pyramid.stages(),
            generator.stages()
        )));
    }
    let g = Graph::new();
    let c = g.constant(cond.c.clone().reshape(&[1, cond.c.len()]));
    let zv = g.constant(z.z.clone().reshape(&[1, z.z.len()]));
    let words = g.constant(text.word_features.transpose());
    let patterns: Vec<Var> = pyramid.levels.iter().map(|l| g.constant(batch1(l))).collect();
    let vars = generator.forward(&g, c, zv, &[words], &patterns)?;
    let first = |vs: &[Var]| vs.iter().map(|v| g.value(*v).select(0)).collect::<Vec<_>>();
    Ok(StageOutputs {
        hidden: first(&vars.hidden),
        pre_edit: first(&vars.pre_edit),
        edited: first(&vars.edited),
        attention_maps: vars.attention.iter().map(|maps| g.value(maps[0])).collect(),
    })
}
