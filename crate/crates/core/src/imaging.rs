//! Conversions between `image` buffers and `[C, H, W]` tensors in `[-1, 1]`,
//! area-averaging resampling, and PNG codecs.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn to_unit(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

pub fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = to_unit(px[c]);
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn tensor_to_image(t: &Tensor) -> RgbImage {
    let s = t.shape();
    assert!(s.len() == 3 && s[0] == 3, "expected [3, H, W], got {s:?}");
    let (h, w) = (s[1], s[2]);
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| to_byte(t.data()[(c * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    })
}

/// Per-axis weights for box-filter resampling from `src` to `dst` samples.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Area-averaging resample of `[C, H, W]` to `[C, out_h, out_w]`.
pub fn area_resize(t: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return t.clone();
    }
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let mut rows = vec![0.0; c * out_h * w];
    for ch in 0..c {
        for (oy, taps) in wy.iter().enumerate() {
            for &(iy, wt) in taps {
                for x in 0..w {
                    rows[(ch * out_h + oy) * w + x] += wt * t.data()[(ch * h + iy) * w + x];
                }
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for oy in 0..out_h {
            for (ox, taps) in wx.iter().enumerate() {
                out[(ch * out_h + oy) * out_w + ox] = taps.iter().map(|&(ix, wt)| wt * rows[(ch * out_h + oy) * w + ix]).sum();
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Nearest-neighbour integer up-scaling of `[C, H, W]`.
pub fn upscale_nearest(t: &Tensor, factor: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[c, h * factor, w * factor], |i| {
        let x = i % (w * factor);
        let y = (i / (w * factor)) % (h * factor);
        let ch = i / (w * factor * h * factor);
        t.data()[(ch * h + y / factor) * w + x / factor]
    })
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    Ok(buf.into_inner())
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image { path: "<memory>".into(), reason: e.to_string() })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_round_trips() {
        for b in 0..=255u8 {
            assert_eq!(to_byte(to_unit(b)), b);
        }
        assert_eq!(to_byte(5.0), 255);
        assert_eq!(to_byte(-5.0), 0);
    }

    #[test]
    fn area_resize_checkerboard_to_mean() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(area_resize(&t, 1, 1).data(), &[0.0]);
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(area_resize(&t, 1, 1).data(), &[0.25]);
    }

    #[test]
    fn area_resize_preserves_constants_and_mean() {
        let t = Tensor::full(&[3, 10, 10], 0.3);
        let r = area_resize(&t, 4, 4);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        let t = Tensor::from_fn(&[1, 9, 6], |i| (i as f64 * 0.7).sin());
        let r = area_resize(&t, 3, 4);
        assert!((r.mean() - t.mean()).abs() < 1e-12);
    }

    #[test]
    fn image_tensor_round_trip() {
        let img = RgbImage::from_fn(5, 3, |x, y| Rgb([x as u8 * 40, y as u8 * 70, 9]));
        assert_eq!(tensor_to_image(&image_to_tensor(&img)), img);
        let png = encode_png(&img).unwrap();
        assert_eq!(decode_png(&png).unwrap(), img);
    }
}
