//! Image feature vectors for clustering.

use image::RgbImage;

use crate::damsm::ImageEncoder;
use crate::graph::Graph;
use crate::imaging::{area_resize, image_to_tensor};
use crate::tensor::Tensor;

pub trait FeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &RgbImage) -> Vec<f64>;
}

/// An `s×s` colour thumbnail concatenated with per-channel histograms.
#[derive(Clone, Copy, Debug)]
pub struct ThumbnailFeatures {
    pub side: usize,
    pub bins: usize,
}

impl Default for ThumbnailFeatures {
    fn default() -> Self {
        Self { side: 8, bins: 8 }
    }
}

impl FeatureExtractor for ThumbnailFeatures {
    fn dim(&self) -> usize {
        3 * self.side * self.side + 3 * self.bins
    }

    fn extract(&self, image: &RgbImage) -> Vec<f64> {
        let t = image_to_tensor(image);
        let mut v = area_resize(&t, self.side, self.side).into_data();
        let mut hist = vec![0.0; 3 * self.bins];
        let n = (image.width() * image.height()) as f64;
        for px in image.pixels() {
            for c in 0..3 {
                let b = (px[c] as usize * self.bins) / 256;
                hist[c * self.bins + b] += 1.0 / n;
            }
        }
        v.extend(hist);
        v
    }
}

/// Global feature of a trained convolutional image encoder.
pub struct EncoderFeatures {
    pub encoder: ImageEncoder,
}

impl FeatureExtractor for EncoderFeatures {
    fn dim(&self) -> usize {
        self.encoder.global_projection.output_dim()
    }

    fn extract(&self, image: &RgbImage) -> Vec<f64> {
        let r = self.encoder.resolution;
        let t = area_resize(&image_to_tensor(image), r, r);
        let g = Graph::new();
        let x = g.constant(t.reshape(&[1, 3, r, r]));
        match self.encoder.forward(&g, x) {
            Ok((_, global)) => g.value(global).into_data(),
            Err(_) => Tensor::zeros(&[self.dim()]).into_data(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn thumbnail_is_deterministic_and_sized() {
        let f = ThumbnailFeatures::default();
        let a = RgbImage::from_fn(20, 30, |x, y| Rgb([x as u8 * 9, y as u8 * 5, 77]));
        let v = f.extract(&a);
        assert_eq!(v.len(), f.dim());
        assert_eq!(v, f.extract(&a.clone()));
        let hist: f64 = v[3 * 64..3 * 64 + 8].iter().sum();
        assert!((hist - 1.0).abs() < 1e-12);
    }
}
