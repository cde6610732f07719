use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distribution of the generator's noise vector `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// i.i.d. uniform on `[-1, 1]`.
    #[default]
    Uniform,
    Gaussian,
}

/// Network geometry shared by every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub embed_dim: usize,
    /// Word-feature and sentence-vector width; split evenly between the two LSTM directions.
    pub text_dim: usize,
    pub cond_dim: usize,
    pub noise_dim: usize,
    pub noise: NoiseDistribution,
    pub hidden_dim: usize,
    pub edit_dim: usize,
    pub disc_dim: usize,
    pub damsm_channels: usize,
    /// Side of the DAMSM region grid.
    pub region_grid: usize,
    pub stages: usize,
    pub base_resolution: usize,
    /// The generator reuses the pretrained DAMSM text encoder, frozen.
    pub share_text_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1,
            max_caption_len: 12,
            embed_dim: 32,
            text_dim: 64,
            cond_dim: 32,
            noise_dim: 32,
            noise: NoiseDistribution::Uniform,
            hidden_dim: 32,
            edit_dim: 32,
            disc_dim: 32,
            damsm_channels: 32,
            region_grid: 8,
            stages: 3,
            base_resolution: 16,
            share_text_encoder: true,
        }
    }
}

impl ModelConfig {
    /// Smallest geometry used by gradient checks and fast tests.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 8,
            text_dim: 8,
            cond_dim: 8,
            noise_dim: 8,
            hidden_dim: 8,
            edit_dim: 8,
            disc_dim: 8,
            damsm_channels: 8,
            region_grid: 4,
            stages: 2,
            base_resolution: 8,
            ..Self::default()
        }
    }

    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.base_resolution << stage
    }

    pub fn final_resolution(&self) -> usize {
        self.stage_resolution(self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stages == 0 {
            return bad("at least one stage is required".into());
        }
        if self.vocab_size == 0 {
            return bad("vocabulary is empty".into());
        }
        if !self.text_dim.is_multiple_of(2) || self.text_dim == 0 {
            return bad(format!("text_dim {} must be even and positive", self.text_dim));
        }
        let r = self.base_resolution;
        if r < 4 || !r.is_power_of_two() {
            return bad(format!("base_resolution {r} must be a power of two >= 4"));
        }
        let top = self.final_resolution();
        if self.region_grid == 0 || !self.region_grid.is_power_of_two() || self.region_grid > top {
            return bad(format!("region_grid {} must be a power of two <= {top}", self.region_grid));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("cond_dim", self.cond_dim),
            ("noise_dim", self.noise_dim),
            ("hidden_dim", self.hidden_dim),
            ("edit_dim", self.edit_dim),
            ("disc_dim", self.disc_dim),
            ("damsm_channels", self.damsm_channels),
            ("max_caption_len", self.max_caption_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }
}
