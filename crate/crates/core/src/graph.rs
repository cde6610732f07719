//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! record in reverse. Parameters enter through [`Graph::param`], which binds
//! each [`Param`] at most once so shared weights (recurrent cells, repeated
//! heads) accumulate into a single gradient.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::kernels::{self, ConvGeom, Exec};
use crate::nn::{Module, Param};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    SumLast(Var),
    ExpandLast(Var, usize),
    AddBias { x: Var, bias: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    NormalizeRows { x: Var, floor: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    LogSigmoidClamped { x: Var, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Split `shape` around `axis` into (outer, size, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let k = *shape.last().expect("operation needs at least one axis");
    (numel(shape) / k.max(1), k)
}

fn reduced_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<u64, Var>>,
    frozen: RefCell<HashSet<u64>>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            frozen: RefCell::new(HashSet::new()),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    /// Parameters of `module` bound after this call enter as constants.
    pub fn freeze(&self, module: &dyn Module) {
        let mut frozen = self.frozen.borrow_mut();
        for (_, p) in module.named_params() {
            frozen.insert(p.id());
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to any parameter.
    pub fn input(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&self, p: &Param) -> Var {
        if let Some(&v) = self.bound.borrow().get(&p.id()) {
            return v;
        }
        let trainable = !self.frozen.borrow().contains(&p.id());
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.bound.borrow_mut().insert(p.id(), v);
        v
    }

    /// A constant copy of `v`'s current value.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.value(v);
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn with<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with(x, |t| t.map(f));
        let rg = self.needs(&[x]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.with2(a, b, |x, y| {
            assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch in {op:?}");
            x.zip_map(y, f)
        });
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    /// `ln(clamp(sigmoid(x), eps, 1 - eps))`, elementwise.
    pub fn log_sigmoid_clamped(&self, x: Var, eps: f64) -> Var {
        self.unary(x, Op::LogSigmoidClamped { x, eps }, |v| sigmoid(v).clamp(eps, 1.0 - eps).ln())
    }

    pub fn sum(&self, x: Var) -> Var {
        let value = self.with(x, |t| Tensor::scalar(t.sum()));
        let rg = self.needs(&[x]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.with(x, |t| t.len());
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis.
    pub fn sum_last(&self, x: Var) -> Var {
        let value = self.with(x, |t| {
            let (rows, k) = last_dim(t.shape());
            let data = t.data().chunks(k).map(|r| r.iter().sum()).collect::<Vec<f64>>();
            debug_assert_eq!(data.len(), rows);
            Tensor::new(reduced_last(t.shape()), data)
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::SumLast(x), rg)
    }

    /// Repeat every element `k` times along a new trailing axis.
    pub fn expand_last(&self, x: Var, k: usize) -> Var {
        let value = self.with(x, |t| {
            let mut shape = t.shape().to_vec();
            shape.push(k);
            let data = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
            Tensor::new(shape, data)
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::ExpandLast(x, k), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let exec = self.exec;
        let value = self.with2(a, b, |x, y| {
            assert!(x.ndim() == 2 && y.ndim() == 2, "matmul expects matrices");
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let (k2, n) = (y.shape()[0], y.shape()[1]);
            assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", x.shape(), y.shape());
            Tensor::new(vec![m, n], kernels::matmul(exec, x.data(), y.data(), m, k, n))
        });
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&self, x: Var) -> Var {
        let value = self.with(x, Tensor::transpose);
        let rg = self.needs(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let value = self.with(x, |t| t.clone().reshape(shape));
        let rg = self.needs(&[x]);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Broadcast-add a vector `bias` (length `shape[axis]`) along `axis`.
    pub fn add_bias(&self, x: Var, bias: Var, axis: usize) -> Var {
        let value = self.with2(x, bias, |t, b| {
            let (outer, size, inner) = axis_split(t.shape(), axis);
            assert_eq!(b.len(), size, "bias length {} vs axis size {size}", b.len());
            let mut out = t.clone();
            let d = out.data_mut();
            for o in 0..outer {
                for s in 0..size {
                    let bv = b.data()[s];
                    for v in &mut d[(o * size + s) * inner..][..inner] {
                        *v += bv;
                    }
                }
            }
            out
        });
        let rg = self.needs(&[x, bias]);
        self.push(value, Op::AddBias { x, bias, axis }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let value = self.with(x, |t| {
            let (_, k) = last_dim(t.shape());
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(k) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Var {
        let value = self.with(x, |t| {
            let (_, k) = last_dim(t.shape());
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(k) {
                let lse = logsumexp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Log-sum-exp over the last axis.
    pub fn logsumexp(&self, x: Var) -> Var {
        let value = self.with(x, |t| {
            let (_, k) = last_dim(t.shape());
            let data = t.data().chunks(k).map(logsumexp).collect();
            Tensor::new(reduced_last(t.shape()), data)
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::LogSumExp(x), rg)
    }

    /// L2-normalize along the last axis; norms below `floor` are replaced by `floor`.
    pub fn normalize_rows(&self, x: Var, floor: f64) -> Var {
        let value = self.with(x, |t| {
            let (_, k) = last_dim(t.shape());
            let mut out = t.clone();
            for row in out.data_mut().chunks_mut(k) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(floor);
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            out
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::NormalizeRows { x, floor }, rg)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let first = nodes[parts[0].0].value.shape().to_vec();
            let mut total = 0;
            for p in parts {
                let s = nodes[p.0].value.shape();
                assert_eq!(s.len(), first.len(), "concat rank mismatch");
                for (d, (a, b)) in s.iter().zip(&first).enumerate() {
                    assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for p in parts {
                    let t = &nodes[p.0].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(shape, data)
        };
        let rg = self.needs(parts);
        self.push(value, Op::Concat { parts: parts.to_vec(), axis }, rg)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.with(x, |t| {
            let (outer, size, inner) = axis_split(t.shape(), axis);
            assert!(start + len <= size, "narrow {start}+{len} out of range {size}");
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&t.data()[(o * size + start) * inner..][..len * inner]);
            }
            Tensor::new(shape, data)
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::Narrow { x, axis, start }, rg)
    }

    /// Rows `ids` of a `[V, D]` table, as `[ids.len(), D]`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Var {
        let value = self.with(table, |t| {
            let d = t.shape()[1];
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                assert!(i < t.shape()[0], "row {i} out of range");
                data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![ids.len(), d], data)
        });
        let rg = self.needs(&[table]);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Square-kernel convolution of `x [N, C, H, W]` with `w [O, C, K, K]`, no bias.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let exec = self.exec;
        let (value, geom) = self.with2(x, w, |xt, wt| {
            let xs = xt.shape();
            let ws = wt.shape();
            assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
            assert_eq!(ws[1], xs[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
            let geom = ConvGeom {
                batch: xs[0],
                in_ch: xs[1],
                height: xs[2],
                width: xs[3],
                out_ch: ws[0],
                kernel: ws[2],
                stride,
                pad,
            };
            let out = kernels::conv2d(exec, xt.data(), wt.data(), geom);
            (
                Tensor::new(vec![geom.batch, geom.out_ch, geom.out_height(), geom.out_width()], out),
                geom,
            )
        });
        let rg = self.needs(&[x, w]);
        self.push(value, Op::Conv2d { x, w, geom }, rg)
    }

    /// Nearest-neighbour 2× spatial up-sampling of `[N, C, H, W]`.
    pub fn upsample2x(&self, x: Var) -> Var {
        let value = self.with(x, |t| {
            let s = t.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut data = vec![0.0; planes * 4 * h * w];
            for p in 0..planes {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        data[(p * 2 * h + y) * 2 * w + xx] = t.data()[(p * h + y / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], data)
        });
        let rg = self.needs(&[x]);
        self.push(value, Op::Upsample2x(x), rg)
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        let exec = self.exec;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(gy);
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let mut contribs: Vec<(Var, Tensor)> = Vec::with_capacity(2);
            let mut acc = |v: Var, g: Tensor| {
                if nodes[v.0].requires_grad {
                    contribs.push((v, g));
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, gy.clone());
                    acc(*b, gy);
                }
                Op::Sub(a, b) => {
                    acc(*b, gy.map(|v| -v));
                    acc(*a, gy);
                }
                Op::Mul(a, b) => {
                    acc(*a, gy.zip_map(val(*b), |g, y| g * y));
                    acc(*b, gy.zip_map(val(*a), |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    acc(*a, gy.zip_map(y, |g, y| g / y));
                    let gb = Tensor::from_fn(gy.shape(), |k| -gy.data()[k] * x.data()[k] / (y.data()[k] * y.data()[k]));
                    acc(*b, gb);
                }
                Op::Scale(x, s) => acc(*x, gy.map(|g| g * s)),
                Op::AddScalar(x) => acc(*x, gy),
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    let bt = y.transpose();
                    let ga = kernels::matmul(exec, gy.data(), bt.data(), m, n, k);
                    let at = x.transpose();
                    let gb = kernels::matmul(exec, at.data(), gy.data(), k, m, n);
                    acc(*a, Tensor::new(vec![m, k], ga));
                    acc(*b, Tensor::new(vec![k, n], gb));
                }
                Op::Transpose(x) => acc(*x, gy.transpose()),
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, gy.reshape(&shape));
                }
                Op::Tanh(x) => acc(*x, gy.zip_map(&node.value, |g, y| g * (1.0 - y * y))),
                Op::Sigmoid(x) => acc(*x, gy.zip_map(&node.value, |g, y| g * y * (1.0 - y))),
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    acc(*x, gy.zip_map(val(*x), |g, v| if v > 0.0 { g } else { g * s }));
                }
                Op::Exp(x) => acc(*x, gy.zip_map(&node.value, |g, y| g * y)),
                Op::Log(x) => acc(*x, gy.zip_map(val(*x), |g, v| g / v)),
                Op::LogSigmoidClamped { x, eps } => {
                    let e = *eps;
                    acc(
                        *x,
                        gy.zip_map(val(*x), |g, v| {
                            let p = sigmoid(v);
                            if p < e || p > 1.0 - e {
                                0.0
                            } else {
                                g * (1.0 - p)
                            }
                        }),
                    );
                }
                Op::SumAll(x) => {
                    let g = gy.item();
                    acc(*x, Tensor::full(val(*x).shape(), g));
                }
                Op::SumLast(x) => {
                    let shape = val(*x).shape().to_vec();
                    let (_, k) = last_dim(&shape);
                    let data = gy.data().iter().flat_map(|&g| std::iter::repeat_n(g, k)).collect();
                    acc(*x, Tensor::new(shape, data));
                }
                Op::ExpandLast(x, k) => {
                    let shape = val(*x).shape().to_vec();
                    let data = gy.data().chunks(*k).map(|c| c.iter().sum()).collect();
                    acc(*x, Tensor::new(shape, data));
                }
                Op::AddBias { x, bias, axis } => {
                    let (outer, size, inner) = axis_split(gy.shape(), *axis);
                    let mut gb = vec![0.0; size];
                    for o in 0..outer {
                        for (s, b) in gb.iter_mut().enumerate() {
                            *b += gy.data()[(o * size + s) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                    acc(*bias, Tensor::new(val(*bias).shape().to_vec(), gb));
                    acc(*x, gy);
                }
                Op::Softmax(x) => {
                    let (_, k) = last_dim(gy.shape());
                    let mut gx = gy.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for (g, y) in grow.iter_mut().zip(yrow) {
                            *g = y * (*g - dot);
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSoftmax(x) => {
                    let (_, k) = last_dim(gy.shape());
                    let mut gx = gy.clone();
                    for (grow, yrow) in gx.data_mut().chunks_mut(k).zip(node.value.data().chunks(k)) {
                        let s: f64 = grow.iter().sum();
                        for (g, y) in grow.iter_mut().zip(yrow) {
                            *g -= y.exp() * s;
                        }
                    }
                    acc(*x, gx);
                }
                Op::LogSumExp(x) => {
                    let xv = val(*x);
                    let (_, k) = last_dim(xv.shape());
                    let mut gx = xv.clone();
                    for (r, row) in gx.data_mut().chunks_mut(k).enumerate() {
                        let lse = node.value.data()[r];
                        let g = gy.data()[r];
                        for v in row.iter_mut() {
                            *v = g * (*v - lse).exp();
                        }
                    }
                    acc(*x, gx);
                }
                Op::NormalizeRows { x, floor } => {
                    let xv = val(*x);
                    let (_, k) = last_dim(xv.shape());
                    let mut gx = gy.clone();
                    for ((grow, xrow), yrow) in gx
                        .data_mut()
                        .chunks_mut(k)
                        .zip(xv.data().chunks(k))
                        .zip(node.value.data().chunks(k))
                    {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < *floor {
                            for g in grow.iter_mut() {
                                *g /= floor;
                            }
                        } else {
                            let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                            for (g, y) in grow.iter_mut().zip(yrow) {
                                *g = (*g - y * dot) / norm;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Concat { parts, axis } => {
                    let (outer, _, inner) = axis_split(gy.shape(), *axis);
                    let mut offset = 0;
                    let total = gy.shape()[*axis] * inner;
                    for p in parts {
                        let pshape = val(*p).shape().to_vec();
                        let block = pshape[*axis] * inner;
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            data.extend_from_slice(&gy.data()[o * total + offset..][..block]);
                        }
                        offset += block;
                        acc(*p, Tensor::new(pshape, data));
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let shape = val(*x).shape().to_vec();
                    let (outer, size, inner) = axis_split(&shape, *axis);
                    let len = gy.shape()[*axis];
                    let mut gx = Tensor::zeros(&shape);
                    for o in 0..outer {
                        gx.data_mut()[(o * size + start) * inner..][..len * inner]
                            .copy_from_slice(&gy.data()[o * len * inner..][..len * inner]);
                    }
                    acc(*x, gx);
                }
                Op::Gather { table, ids } => {
                    let shape = val(*table).shape().to_vec();
                    let d = shape[1];
                    let mut gt = Tensor::zeros(&shape);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt.data_mut()[id * d + j] += gy.data()[r * d + j];
                        }
                    }
                    acc(*table, gt);
                }
                Op::Conv2d { x, w, geom } => {
                    let (xv, wv) = (val(*x), val(*w));
                    if nodes[x.0].requires_grad {
                        let gx = kernels::conv2d_grad_input(exec, gy.data(), wv.data(), *geom);
                        acc(*x, Tensor::new(xv.shape().to_vec(), gx));
                    }
                    if nodes[w.0].requires_grad {
                        let gw = kernels::conv2d_grad_weight(exec, gy.data(), xv.data(), *geom);
                        acc(*w, Tensor::new(wv.shape().to_vec(), gw));
                    }
                }
                Op::Upsample2x(x) => {
                    let shape = val(*x).shape().to_vec();
                    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
                    let mut gx = Tensor::zeros(&shape);
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx.data_mut()[(p * h + y / 2) * w + xx / 2] += gy.data()[(p * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    acc(*x, gx);
                }
            }
            for (v, g) in contribs {
                match &mut grads[v.0] {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let params = self.bound.borrow().clone();
        Gradients { grads, params }
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<u64, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a bound parameter; `None` when it did not influence the loss.
    pub fn param(&self, p: &Param) -> Option<&Tensor> {
        self.params.get(&p.id()).and_then(|v| self.wrt(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(x.shape(), |i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn check(x: Tensor, build: impl Fn(&Graph, Var) -> Var) {
        let g = Graph::new();
        let v = g.input(x.clone());
        let out = build(&g, v);
        let grads = g.backward(out);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = numeric_grad(&x, |t| {
            let g = Graph::new();
            let v = g.input(t.clone());
            let o = build(&g, v);
            g.item(o)
        });
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < 1e-5 || (a - n).abs() < 1e-8, "analytic {a} vs numeric {n}");
        }
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        Tensor::from_fn(shape, |i| ((((i as u64 + 3) * 2654435761 + seed * 97) % 2000) as f64 / 1000.0 - 1.0) * 0.9)
    }

    // Fixed weights for projecting vector outputs to a scalar.
    fn probe(g: &Graph, v: Var) -> Var {
        let shape = g.shape(v);
        let w = g.constant(sample(&shape, 99));
        let p = g.mul(v, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops() {
        let x = sample(&[3, 4], 1);
        check(x.clone(), |g, v| {
            let t = g.tanh(v);
            probe(g, t)
        });
        check(x.clone(), |g, v| {
            let s = g.sigmoid(v);
            probe(g, s)
        });
        check(x.clone(), |g, v| {
            let e = g.exp(v);
            let l = g.log(g.add_scalar(e, 1.0));
            probe(g, l)
        });
        check(x.clone(), |g, v| {
            let a = g.mul(v, v);
            let b = g.div(a, g.add_scalar(g.exp(v), 0.5));
            probe(g, g.sub(b, g.scale(v, 3.0)))
        });
        check(x, |g, v| {
            let l = g.leaky_relu(v, 0.2);
            probe(g, l)
        });
    }

    #[test]
    fn reductions_and_normalizers() {
        let x = sample(&[3, 5], 2);
        check(x.clone(), |g, v| probe(g, g.softmax(v)));
        check(x.clone(), |g, v| probe(g, g.log_softmax(v)));
        check(x.clone(), |g, v| probe(g, g.logsumexp(v)));
        check(x.clone(), |g, v| probe(g, g.normalize_rows(v, 1e-8)));
        check(x.clone(), |g, v| probe(g, g.sum_last(v)));
        check(x.clone(), |g, v| probe(g, g.expand_last(v, 3)));
        check(x, |g, v| probe(g, g.log_sigmoid_clamped(v, 1e-7)));
    }

    #[test]
    fn structural_ops() {
        let x = sample(&[2, 3, 4], 3);
        check(x.clone(), |g, v| {
            let a = g.narrow(v, 1, 1, 2);
            let b = g.narrow(v, 2, 0, 3);
            let c = g.concat(&[a, g.narrow(v, 1, 0, 1)], 1);
            let r = g.reshape(c, &[6, 4]);
            let t = g.transpose(r);
            g.add(probe(g, t), probe(g, b))
        });
        let table = sample(&[5, 3], 4);
        check(table, |g, v| probe(g, g.gather_rows(v, &[4, 0, 4, 2])));
        let m = sample(&[3, 4], 5);
        check(m.clone(), |g, v| {
            let w = g.constant(sample(&[4, 2], 6));
            probe(g, g.matmul(v, w))
        });
        check(m, |g, v| {
            let w = g.constant(sample(&[2, 3], 7));
            probe(g, g.matmul(w, v))
        });
        let b = sample(&[3], 8);
        check(b, |g, v| {
            let x = g.constant(sample(&[2, 3, 2, 2], 9));
            probe(g, g.add_bias(x, v, 1))
        });
    }

    #[test]
    fn convolution_and_upsampling() {
        let x = sample(&[2, 2, 4, 4], 10);
        let w = sample(&[3, 2, 3, 3], 11);
        let wc = w.clone();
        check(x.clone(), move |g, v| {
            let w = g.constant(wc.clone());
            probe(g, g.conv2d(v, w, 2, 1))
        });
        check(w, move |g, v| {
            let x = g.constant(x.clone());
            probe(g, g.conv2d(x, v, 1, 1))
        });
        check(sample(&[1, 2, 3, 3], 12), |g, v| probe(g, g.upsample2x(v)));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let p = Param::new(Tensor::from_vec(vec![2.0, -1.0]));
        let g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        let y = g.sum(g.mul(a, b));
        let grads = g.backward(y);
        assert_eq!(grads.param(&p).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let v = g.constant(sample(&[4, 7], 13));
        let s = g.value(g.softmax(v));
        for row in s.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
