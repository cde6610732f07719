//! Tokenization, vocabulary, the bidirectional LSTM text encoder, and
//! conditioning augmentation with its KL regularizer.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{normal_tensor, prefixed, prefixed_mut, Linear, LstmCell, Module, Param, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const UNKNOWN_TOKEN: &str = "<unk>";
pub const UNKNOWN_ID: usize = 0;

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// CJK ideographs become one token each; other alphanumeric runs become
/// lowercase words; whitespace and punctuation separate.
#[derive(Clone, Copy, Debug, Default)]
pub struct MixedTokenizer;

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

impl Tokenizer for MixedTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut word = String::new();
        for c in text.chars() {
            if is_cjk(c) {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(c.to_string());
            } else if c.is_alphanumeric() || c == '\'' {
                word.extend(c.to_lowercase());
            } else if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
        out.retain(|w| w.chars().any(char::is_alphanumeric));
        out
    }
}

/// Token list where the line number is the id; id 0 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::InvalidArgument(format!("vocabulary must start with {UNKNOWN_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Tokens ordered by descending frequency, ties broken lexically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, tokenizer: &dyn Tokenizer) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in tokenizer.tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        counts.remove(UNKNOWN_TOKEN);
        let mut ranked: Vec<_> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![UNKNOWN_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNKNOWN_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::parse(&text)
    }

    /// Tokenize and index `text`; rejects empty and over-long captions.
    pub fn caption(&self, text: &str, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<Caption> {
        let ids: Vec<usize> = tokenizer.tokenize(text).iter().map(|t| self.id(t)).collect();
        Caption::new(ids, text, self.len(), max_len)
    }

    /// Like [`Vocabulary::caption`] but keeps only the first `max_len` tokens.
    pub fn caption_truncated(&self, text: &str, tokenizer: &dyn Tokenizer, max_len: usize) -> Result<Caption> {
        let mut ids: Vec<usize> = tokenizer.tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.truncate(max_len);
        Caption::new(ids, text, self.len(), max_len)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    tokens: Vec<usize>,
    raw: String,
}

impl Caption {
    pub fn new(tokens: Vec<usize>, raw: &str, vocab_size: usize, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyCaption);
        }
        if tokens.len() > max_len {
            return Err(Error::CaptionTooLong { len: tokens.len(), max: max_len });
        }
        if let Some(&index) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::OutOfVocabulary { index, vocab: vocab_size });
        }
        Ok(Self { tokens, raw: raw.to_string() })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }
}

/// Word features `[text_dim, T]` (one column per token) and the sentence vector `[text_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub word_features: Tensor,
    pub sentence_vector: Tensor,
}

/// Embedding table followed by a bidirectional LSTM.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Param,
    pub forward_cell: LstmCell,
    pub backward_cell: LstmCell,
}

impl TextEncoder {
    pub fn new(vocab_size: usize, embed_dim: usize, text_dim: usize, rng: &mut impl Rng) -> Self {
        assert!(text_dim.is_multiple_of(2), "text_dim must be even");
        Self {
            embedding: Param::new(normal_tensor(&[vocab_size, embed_dim], 1.0, rng)),
            forward_cell: LstmCell::new(embed_dim, text_dim / 2, rng),
            backward_cell: LstmCell::new(embed_dim, text_dim / 2, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.value.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        2 * self.forward_cell.hidden_dim()
    }

    fn check(&self, caption: &Caption) -> Result<()> {
        if caption.is_empty() {
            return Err(Error::EmptyCaption);
        }
        let vocab = self.vocab_size();
        if let Some(&index) = caption.tokens().iter().find(|&&t| t >= vocab) {
            return Err(Error::OutOfVocabulary { index, vocab });
        }
        Ok(())
    }

    /// Word features `[T, text_dim]` (one row per token) and sentence vector `[1, text_dim]`.
    pub fn encode_graph(&self, g: &Graph, caption: &Caption) -> Result<(Var, Var)> {
        self.check(caption)?;
        let t = caption.len();
        let table = g.param(&self.embedding);
        let emb = g.gather_rows(table, caption.tokens());
        let fwd = self.forward_cell.run(g, emb, 0..t);
        let mut bwd = self.backward_cell.run(g, emb, (0..t).rev());
        bwd.reverse();
        let rows: Vec<Var> = fwd.iter().zip(&bwd).map(|((_, f), (_, b))| g.concat(&[*f, *b], 1)).collect();
        let words = g.concat(&rows, 0);
        let sentence = g.concat(&[fwd[t - 1].1, bwd[0].1], 1);
        Ok((words, sentence))
    }
}

impl Module for TextEncoder {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = vec![("embedding".to_string(), &self.embedding)];
        v.extend(prefixed("forward", self.forward_cell.named_params()));
        v.extend(prefixed("backward", self.backward_cell.named_params()));
        v
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = vec![("embedding".to_string(), &mut self.embedding)];
        v.extend(prefixed_mut("forward", self.forward_cell.named_params_mut()));
        v.extend(prefixed_mut("backward", self.backward_cell.named_params_mut()));
        v
    }
}

pub fn encode_text(caption: &Caption, encoder: &TextEncoder) -> Result<TextEncoding> {
    let g = Graph::new();
    let (words, sentence) = encoder.encode_graph(&g, caption)?;
    let word_features = g.value(words).transpose();
    let sentence_vector = g.value(sentence);
    let d = sentence_vector.len();
    Ok(TextEncoding {
        word_features,
        sentence_vector: sentence_vector.reshape(&[d]),
    })
}

/// Stochastic condition `c = mu + exp(logvar / 2) * noise`, with its inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCondition {
    pub c: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
    pub noise_used: Tensor,
}

/// Conditioning augmentation: `[mu | logvar] = leaky(W s + b)`.
#[derive(Clone, Debug)]
pub struct CondAugment {
    pub projection: Linear,
}

impl CondAugment {
    pub fn new(text_dim: usize, cond_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            projection: Linear::new(text_dim, 2 * cond_dim, rng),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.projection.output_dim() / 2
    }

    /// `sentence [N, text_dim]`, `noise [N, cond_dim]` → `(c, mu, logvar)`, each `[N, cond_dim]`.
    pub fn forward(&self, g: &Graph, sentence: Var, noise: Var) -> (Var, Var, Var) {
        let d = self.cond_dim();
        let h = g.leaky_relu(self.projection.forward(g, sentence), LEAKY_SLOPE);
        let mu = g.narrow(h, 1, 0, d);
        let logvar = g.narrow(h, 1, d, d);
        let std = g.exp(g.scale(logvar, 0.5));
        let c = g.add(mu, g.mul(std, noise));
        (c, mu, logvar)
    }
}

impl Module for CondAugment {
    fn named_params(&self) -> Vec<(String, &Param)> {
        prefixed("projection", self.projection.named_params())
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        prefixed_mut("projection", self.projection.named_params_mut())
    }
}

pub fn standard_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

pub fn condition_augment_with_noise(sentence: &Tensor, ca: &CondAugment, noise: &Tensor) -> Result<AugmentedCondition> {
    if !sentence.is_finite() {
        return Err(Error::NonFinite("sentence vector".into()));
    }
    let d = ca.cond_dim();
    if noise.len() != d {
        return Err(Error::Shape(format!("noise has {} entries, expected {d}", noise.len())));
    }
    let g = Graph::new();
    let s = g.constant(sentence.clone().reshape(&[1, sentence.len()]));
    let n = g.constant(noise.clone().reshape(&[1, d]));
    let (c, mu, logvar) = ca.forward(&g, s, n);
    let flat = |v: Var| g.value(v).reshape(&[d]);
    Ok(AugmentedCondition {
        c: flat(c),
        mu: flat(mu),
        logvar: flat(logvar),
        noise_used: noise.clone().reshape(&[d]),
    })
}

pub fn condition_augment(sentence: &Tensor, ca: &CondAugment, rng: &mut impl Rng) -> Result<AugmentedCondition> {
    let noise = standard_normal(&[ca.cond_dim()], rng);
    condition_augment_with_noise(sentence, ca, &noise)
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn kl_regularizer(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!("mu has {} entries, logvar {}", mu.len(), logvar.len())));
    }
    let s: f64 = mu.iter().zip(logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum();
    Ok(-0.5 * s)
}

/// Analytic gradient of [`kl_regularizer`]: `(d/dmu, d/dlogvar)`.
pub fn kl_regularizer_grad(mu: &[f64], logvar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape(format!("mu has {} entries, logvar {}", mu.len(), logvar.len())));
    }
    Ok((mu.to_vec(), logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect()))
}

/// Batch-mean KL of `[N, D]` rows, as a graph scalar.
pub fn kl_loss(g: &Graph, mu: Var, logvar: Var) -> Var {
    let n = g.shape(mu)[0];
    let mu2 = g.mul(mu, mu);
    let inner = g.sub(g.sub(g.add_scalar(logvar, 1.0), mu2), g.exp(logvar));
    g.scale(g.sum(inner), -0.5 / n as f64)
}
