//! Generator and discriminator objectives on logits, with probabilities
//! clamped to `[ε, 1 − ε]` before the logarithm.

use serde::{Deserialize, Serialize};

use crate::adversary::Discriminator;
use crate::damsm::{damsm_terms, Damsm, Gammas};
use crate::error::{Error, Result};
use crate::generator::StageOutputs;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::text::Caption;

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub damsm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { kl: 1.0, damsm: 5.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLossBreakdown {
    /// `−½ log D_i(x̄_i) − ½ log D_i(x̄_i, ĉ)` per stage, batch mean.
    pub stages: Vec<f64>,
    pub adversarial: f64,
    /// Unweighted matching loss on the final-stage images.
    pub damsm: f64,
    /// Unweighted KL term, batch mean.
    pub kl: f64,
    pub total: f64,
}

/// Graph handles of the generator objective.
pub struct GeneratorTerms {
    pub total: Var,
    pub stages: Vec<Var>,
    pub damsm: Option<Var>,
    pub kl: Option<Var>,
}

impl GeneratorTerms {
    pub fn breakdown(&self, g: &Graph) -> GeneratorLossBreakdown {
        let stages: Vec<f64> = self.stages.iter().map(|v| g.item(*v)).collect();
        GeneratorLossBreakdown {
            adversarial: stages.iter().sum(),
            stages,
            damsm: self.damsm.map_or(0.0, |v| g.item(v)),
            kl: self.kl.map_or(0.0, |v| g.item(v)),
            total: g.item(self.total),
        }
    }
}

fn log_p(g: &Graph, logits: Var) -> Var {
    g.log_sigmoid_clamped(logits, PROB_EPS)
}

fn log_one_minus_p(g: &Graph, logits: Var) -> Var {
    g.log_sigmoid_clamped(g.neg(logits), PROB_EPS)
}

fn half_sum(g: &Graph, a: Var, b: Var) -> Var {
    g.scale(g.add(a, b), 0.5)
}

/// Batch-mean non-saturating generator term for one stage from `(uncond, cond)` logits `[N]`.
pub fn generator_stage_term(g: &Graph, uncond: Var, cond: Var) -> Var {
    g.neg(g.mean(half_sum(g, log_p(g, uncond), log_p(g, cond))))
}

/// Logits `[N]` for real, fake and optionally mismatched-caption pairs.
pub struct DiscriminatorLogits {
    pub real_uncond: Var,
    pub real_cond: Var,
    pub fake_uncond: Var,
    pub fake_cond: Var,
    pub mismatched_cond: Option<Var>,
}

/// Batch-mean cross-entropy for one discriminator. A mismatched-caption term,
/// when present, shares the fake conditional term's weight.
pub fn discriminator_stage_term(g: &Graph, l: &DiscriminatorLogits) -> Var {
    let real = half_sum(g, log_p(g, l.real_uncond), log_p(g, l.real_cond));
    let fake_cond = match l.mismatched_cond {
        Some(m) => half_sum(g, log_one_minus_p(g, l.fake_cond), log_one_minus_p(g, m)),
        None => log_one_minus_p(g, l.fake_cond),
    };
    let fake = half_sum(g, log_one_minus_p(g, l.fake_uncond), fake_cond);
    g.neg(g.mean(g.add(real, fake)))
}

/// Full generator objective in the graph. `edited[i] [N, 3, R_i, R_i]`,
/// `sentences [N, text_dim]`, `mu`/`logvar [N, cond_dim]`.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    g: &Graph,
    edited: &[Var],
    sentences: Var,
    mu: Var,
    logvar: Var,
    captions: &[Caption],
    discriminators: &[Discriminator],
    damsm: &Damsm,
    weights: LossWeights,
    gammas: Gammas,
) -> Result<GeneratorTerms> {
    if edited.len() != discriminators.len() {
        return Err(Error::InvalidArgument(format!(
            "{} stages but {} discriminators",
            edited.len(),
            discriminators.len()
        )));
    }
    let mut stages = Vec::with_capacity(edited.len());
    for (x, d) in edited.iter().zip(discriminators) {
        let (u, c) = d.forward(g, *x, sentences)?;
        stages.push(generator_stage_term(g, u, c));
    }
    let mut total = stages.iter().skip(1).fold(stages[0], |acc, v| g.add(acc, *v));
    let damsm_term = if weights.damsm != 0.0 {
        let last = *edited.last().expect("at least one stage");
        let t = damsm_terms(g, damsm, last, captions, gammas)?.total;
        total = g.add(total, g.scale(t, weights.damsm));
        Some(t)
    } else {
        None
    };
    let kl_term = if weights.kl != 0.0 {
        let k = crate::text::kl_loss(g, mu, logvar);
        total = g.add(total, g.scale(k, weights.kl));
        Some(k)
    } else {
        None
    };
    let terms = GeneratorTerms { total, stages, damsm: damsm_term, kl: kl_term };
    for (i, s) in terms.stages.iter().enumerate() {
        if !g.item(*s).is_finite() {
            return Err(Error::NonFinite(format!("generator adversarial term, stage {i}")));
        }
    }
    if !g.item(terms.total).is_finite() {
        return Err(Error::NonFinite("generator loss".into()));
    }
    Ok(terms)
}

fn batched(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape)
}

/// Generator objective for one sample's stage outputs.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    outputs: &StageOutputs,
    sentence_vector: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    caption: &Caption,
    discriminators: &[Discriminator],
    damsm: &Damsm,
    weights: LossWeights,
    gammas: Gammas,
) -> Result<GeneratorLossBreakdown> {
    let g = Graph::new();
    let edited: Vec<Var> = outputs.edited.iter().map(|x| g.constant(batched(x))).collect();
    let s = g.constant(batched(sentence_vector));
    let m = g.constant(batched(mu));
    let lv = g.constant(batched(logvar));
    let terms = generator_objective(&g, &edited, s, m, lv, std::slice::from_ref(caption), discriminators, damsm, weights, gammas)?;
    Ok(terms.breakdown(&g))
}

/// Discriminator objective for one real/fake pair scored by `disc`.
pub fn discriminator_loss(
    real: &Tensor,
    fake: &Tensor,
    sentence_vector: &Tensor,
    mismatched_sentence: Option<&Tensor>,
    disc: &Discriminator,
) -> Result<f64> {
    let g = Graph::new();
    let s = g.constant(batched(sentence_vector));
    let (real_uncond, real_cond) = disc.forward(&g, g.constant(batched(real)), s)?;
    let (fake_uncond, fake_cond) = disc.forward(&g, g.constant(batched(fake)), s)?;
    let mismatched_cond = match mismatched_sentence {
        Some(m) => {
            let f = disc.trunk(&g, g.constant(batched(real)));
            Some(disc.cond_logits(&g, f, g.constant(batched(m))))
        }
        None => None,
    };
    let l = DiscriminatorLogits { real_uncond, real_cond, fake_uncond, fake_cond, mismatched_cond };
    let v = g.item(discriminator_stage_term(&g, &l));
    if !v.is_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    Ok(v)
}

/// Generator stage term from probabilities, for closed-form checks.
pub fn generator_term_from_probs(p_uncond: f64, p_cond: f64) -> f64 {
    let c = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
    -0.5 * c(p_uncond) - 0.5 * c(p_cond)
}

/// Discriminator term from probabilities `(real_u, real_c, fake_u, fake_c)`.
pub fn discriminator_term_from_probs(real_u: f64, real_c: f64, fake_u: f64, fake_c: f64) -> f64 {
    let c = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln();
    -0.5 * (c(real_u) + c(real_c)) - 0.5 * (c(1.0 - fake_u) + c(1.0 - fake_c))
}
