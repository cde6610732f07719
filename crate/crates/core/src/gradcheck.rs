//! Central finite-difference checks against the reverse-mode gradients.

use crate::graph::{Graph, Var};
use crate::nn::Module;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over the checked entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-10)
}

/// Entry indices to probe: all of them when `limit` covers the tensor, else an even stride.
fn probe_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        (0..limit).map(|i| i * len / limit).collect()
    }
}

/// Compare `d build(x) / dx` with central differences. `build` must return a scalar.
pub fn input_gradient_error(x: &Tensor, limit: usize, build: impl Fn(&Graph, Var) -> Var) -> f64 {
    let g = Graph::new();
    let v = g.input(x.clone());
    let grads = g.backward(build(&g, v));
    let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |t: Tensor| {
        let g = Graph::new();
        let v = g.input(t);
        g.item(build(&g, v))
    };
    let idx = probe_indices(x.len(), limit);
    let numeric: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let mut p = x.clone();
            p.data_mut()[i] += STEP;
            let mut m = x.clone();
            m.data_mut()[i] -= STEP;
            (eval(p) - eval(m)) / (2.0 * STEP)
        })
        .collect();
    let a: Vec<f64> = idx.iter().map(|&i| analytic.data()[i]).collect();
    relative_error(&a, &numeric)
}

fn nudge<M: Module>(module: &mut M, param: usize, index: usize, delta: f64) {
    module.named_params_mut()[param].1.value.data_mut()[index] += delta;
}

/// Compare gradients of every parameter of `module` (up to `limit` entries each)
/// with central differences; returns the worst relative error and its parameter name.
pub fn param_gradient_error<M: Module>(module: &mut M, limit: usize, build: impl Fn(&Graph, &M) -> Var) -> (f64, String) {
    let g = Graph::new();
    let loss = build(&g, module);
    let grads = g.backward(loss);
    let analytic: Vec<(String, Tensor)> = module
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()))))
        .collect();
    let mut worst = (0.0, String::new());
    for (k, (name, a)) in analytic.iter().enumerate() {
        let idx = probe_indices(a.len(), limit);
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            nudge(module, k, i, STEP);
            let up = {
                let g = Graph::new();
                g.item(build(&g, module))
            };
            nudge(module, k, i, -2.0 * STEP);
            let down = {
                let g = Graph::new();
                g.item(build(&g, module))
            };
            nudge(module, k, i, STEP);
            numeric.push((up - down) / (2.0 * STEP));
        }
        let av: Vec<f64> = idx.iter().map(|&i| a.data()[i]).collect();
        let err = relative_error(&av, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let err = input_gradient_error(&x, 10, |g, v| g.sum(g.mul(v, v)));
        assert!(err < 1e-8);
    }

    #[test]
    fn detects_wrong_gradient() {
        assert!(relative_error(&[1.0, 0.0], &[0.0, 1.0]) > 0.5);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
