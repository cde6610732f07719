//! Parameters, layers and the Adam optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A trainable tensor with a process-unique identity.
#[derive(Debug)]
pub struct Param {
    id: u64,
    pub value: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }
}

// A clone is a distinct parameter: two clones can live in one graph.
impl Clone for Param {
    fn clone(&self) -> Self {
        Param::new(self.value.clone())
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Param)>;
    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.len()).sum()
    }
}

pub fn prefixed<'a>(prefix: &str, items: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

pub fn prefixed_mut<'a>(prefix: &str, items: Vec<(String, &'a mut Param)>) -> Vec<(String, &'a mut Param)> {
    items.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

/// SHA-256 over parameter names, shapes and raw values, hex-encoded.
pub fn param_digest(module: &dyn Module) -> String {
    let mut h = Sha256::new();
    for (name, p) in module.named_params() {
        h.update(name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(p.value.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Every parameter as an owned `(name, tensor)` pair.
pub fn export_params(module: &dyn Module) -> Vec<(String, Tensor)> {
    module.named_params().into_iter().map(|(n, p)| (n, p.value.clone())).collect()
}

/// Overwrite parameters by name; every parameter must be present with a matching shape.
pub fn import_params(module: &mut dyn Module, tensors: &[(String, Tensor)]) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, p) in module.named_params_mut() {
        let t = lookup.get(name.as_str()).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?}, expected {:?}",
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = (*t).clone();
    }
    Ok(())
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

pub fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / input as f64).sqrt() * 0.5;
        Self {
            weight: Param::new(normal_tensor(&[input, output], std, rng)),
            bias: Param::new(Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.add_bias(g.matmul(x, w), b, 1)
    }

    pub fn zero(&mut self) {
        self.weight.value = Tensor::zeros(self.weight.value.shape());
        self.bias.value = Tensor::zeros(self.bias.value.shape());
    }
}

impl Module for Linear {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// Square-kernel 2-D convolution with bias; "same" padding for odd kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(input: usize, output: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = input * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt() * 0.5;
        Self {
            weight: Param::new(normal_tensor(&[output, input, kernel, kernel], std, rng)),
            bias: Param::new(Tensor::zeros(&[output])),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d(x, w, self.stride, self.kernel() / 2);
        g.add_bias(y, b, 1)
    }

    pub fn zero(&mut self) {
        self.weight.value = Tensor::zeros(self.weight.value.shape());
        self.bias.value = Tensor::zeros(self.bias.value.shape());
    }
}

impl Module for Conv2d {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

/// One direction of an LSTM. Gate order along the packed axis: input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_weight: Param,
    pub hidden_weight: Param,
    pub bias: Param,
}

impl LstmCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // forget gate starts open
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        Self {
            input_weight: Param::new(uniform_tensor(&[input, 4 * hidden], bound, rng)),
            hidden_weight: Param::new(uniform_tensor(&[hidden, 4 * hidden], bound, rng)),
            bias: Param::new(bias),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_weight.value.shape()[0]
    }

    /// Run over `inputs [T, in]` in the given order; returns hidden states in step order.
    pub fn run(&self, g: &Graph, inputs: Var, order: impl Iterator<Item = usize>) -> Vec<(usize, Var)> {
        let hd = self.hidden_dim();
        let wi = g.param(&self.input_weight);
        let wh = g.param(&self.hidden_weight);
        let b = g.param(&self.bias);
        let mut h = g.constant(Tensor::zeros(&[1, hd]));
        let mut c = g.constant(Tensor::zeros(&[1, hd]));
        let mut out = Vec::new();
        for t in order {
            let x = g.narrow(inputs, 0, t, 1);
            let gates = g.add_bias(g.add(g.matmul(x, wi), g.matmul(h, wh)), b, 1);
            let i = g.sigmoid(g.narrow(gates, 1, 0, hd));
            let f = g.sigmoid(g.narrow(gates, 1, hd, hd));
            let cand = g.tanh(g.narrow(gates, 1, 2 * hd, hd));
            let o = g.sigmoid(g.narrow(gates, 1, 3 * hd, hd));
            c = g.add(g.mul(f, c), g.mul(i, cand));
            h = g.mul(o, g.tanh(c));
            out.push((t, h));
        }
        out
    }
}

impl Module for LstmCell {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![
            ("input_weight".into(), &self.input_weight),
            ("hidden_weight".into(), &self.hidden_weight),
            ("bias".into(), &self.bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("input_weight".into(), &mut self.input_weight),
            ("hidden_weight".into(), &mut self.hidden_weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed module layout; moment buffers follow `named_params` order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig, module: &dyn Module) -> Self {
        let moments = module
            .named_params()
            .iter()
            .map(|(_, p)| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .collect();
        Self { config, step: 0, moments }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update; parameters without a gradient are left untouched.
    pub fn update(&mut self, module: &mut dyn Module, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((_, p), (m, v)) in module.named_params_mut().into_iter().zip(self.moments.iter_mut()) {
            let Some(g) = grads.param(p) else { continue };
            let pd = p.value.data_mut();
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
        }
    }
}
