//! Caption-band removal and re-squaring.

use crate::error::{Error, Result};
use crate::imaging::area_resize;
use crate::tensor::Tensor;

/// Shortest image height left after cropping.
pub const MIN_CROP_HEIGHT: usize = 16;

/// Rows of a height-`h` image kept when the bottom `fraction` holds the caption.
pub fn kept_rows(h: usize, fraction: f64) -> usize {
    h - ((fraction * h as f64).round() as usize).min(h)
}

/// Drop the caption band from `image [3, H, W]`, centre-crop the rest to a
/// square and resize it to `resolution`.
pub fn crop_caption_region(image: &Tensor, band_fraction: f64, resolution: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("image must be [3, H, W], got {s:?}")));
    }
    if !(0.0..1.0).contains(&band_fraction) {
        return Err(Error::InvalidArgument(format!("caption band fraction {band_fraction} outside [0, 1)")));
    }
    let (h, w) = (s[1], s[2]);
    let keep = kept_rows(h, band_fraction);
    if keep < MIN_CROP_HEIGHT {
        return Err(Error::InvalidArgument(format!("crop leaves {keep} rows, need at least {MIN_CROP_HEIGHT}")));
    }
    let side = keep.min(w);
    let y0 = (keep - side) / 2;
    let x0 = (w - side) / 2;
    let data = image.data();
    let square = Tensor::from_fn(&[3, side, side], |i| {
        let c = i / (side * side);
        let y = (i / side) % side;
        let x = i % side;
        data[(c * h + y0 + y) * w + x0 + x]
    });
    Ok(area_resize(&square, resolution, resolution))
}
