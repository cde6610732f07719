//! Compute kernels for the heavy inner loops (matrix products and 2-D
//! convolutions), each with a sequential and a data-parallel path.
//!
//! Both paths partition work over independent output blocks and reduce inside
//! a block in a fixed order, so they produce bitwise-identical results.
//! Without the `parallel` feature, [`Exec::Parallel`] runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Run `f(block_index, block)` over consecutive `chunk`-sized blocks of `out`.
pub fn for_each_block<F>(exec: Exec, out: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => out.par_chunks_mut(chunk).enumerate().for_each(|(i, b)| f(i, b)),
        _ => out.chunks_mut(chunk).enumerate().for_each(|(i, b)| f(i, b)),
    }
}

/// Map `f` over `items`, in order.
pub fn map_items<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for_each_block(exec, &mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Geometry of a square-kernel 2-D convolution over a `[N, C, H, W]` batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn in_index(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Forward convolution, no bias. Output `[N, O, OH, OW]`.
pub fn conv2d(exec: Exec, x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let mut out = vec![0.0; g.batch * g.out_ch * oh * ow];
    for_each_block(exec, &mut out, oh * ow, |block, plane| {
        let (n, o) = (block / g.out_ch, block % g.out_ch);
        for c in 0..g.in_ch {
            let xp = &x[(n * g.in_ch + c) * h * wd..][..h * wd];
            let wk = &w[(o * g.in_ch + c) * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.in_index(oy, ky, h) else { continue };
                        let xrow = &xp[iy * wd..(iy + 1) * wd];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = g.in_index(ox, kx, wd) {
                                *ov += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(exec: Exec, gy: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let mut gx = vec![0.0; g.batch * g.in_ch * h * wd];
    for_each_block(exec, &mut gx, h * wd, |block, plane| {
        let (n, c) = (block / g.in_ch, block % g.in_ch);
        for o in 0..g.out_ch {
            let gp = &gy[(n * g.out_ch + o) * oh * ow..][..oh * ow];
            let wk = &w[(o * g.in_ch + c) * k * k..][..k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let Some(iy) = g.in_index(oy, ky, h) else { continue };
                        for ox in 0..ow {
                            if let Some(ix) = g.in_index(ox, kx, wd) {
                                plane[iy * wd + ix] += wv * gp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

/// Gradient of [`conv2d`] with respect to its weights, `[O, C, K, K]`.
pub fn conv2d_grad_weight(exec: Exec, gy: &[f64], x: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (h, wd, k) = (g.height, g.width, g.kernel);
    let mut gw = vec![0.0; g.out_ch * g.in_ch * k * k];
    for_each_block(exec, &mut gw, g.in_ch * k * k, |o, wblock| {
        for n in 0..g.batch {
            let gp = &gy[(n * g.out_ch + o) * oh * ow..][..oh * ow];
            for c in 0..g.in_ch {
                let xp = &x[(n * g.in_ch + c) * h * wd..][..h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let Some(iy) = g.in_index(oy, ky, h) else { continue };
                            for ox in 0..ow {
                                if let Some(ix) = g.in_index(ox, kx, wd) {
                                    acc += gp[oy * ow + ox] * xp[iy * wd + ix];
                                }
                            }
                        }
                        wblock[(c * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    gw
}
