use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and loss hyperparameters of the latent color field VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Latent channels per voxel.
    pub latent_dim: usize,
    /// Channels per lattice corner of the decoded feature grid.
    pub feature_dim: usize,
    /// Width of per-point features.
    pub point_dim: usize,
    /// Width of per-voxel features in the windowed transformer.
    pub voxel_dim: usize,
    pub encoder_blocks: usize,
    /// Windowed blocks in the latent decoder before per-voxel expansion (0 = no mixing).
    pub decoder_blocks: usize,
    /// Attention window edge in voxels; odd blocks shift by `window / 2`.
    pub window: u32,
    /// Hidden width multiplier of transformer MLPs.
    pub mlp_ratio: usize,
    /// Hidden width of the color MLP.
    pub color_hidden: usize,
    /// Maximum points per voxel entering attention at inference.
    pub point_cap: usize,
    /// Maximum points per voxel entering attention during training.
    pub train_point_cap: usize,
    /// Points whose colors are supervised per training step.
    pub query_points: usize,
    /// Standard deviation of Gaussian color augmentation.
    pub noise_sigma: f64,
    /// KL weight.
    pub beta: f64,
    /// Start with an all-zero feature grid output layer.
    pub zero_init_grid: bool,
    /// Initial bias of the log-variance head.
    pub logvar_init: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            feature_dim: 16,
            point_dim: 64,
            voxel_dim: 64,
            encoder_blocks: 4,
            decoder_blocks: 2,
            window: 8,
            mlp_ratio: 2,
            color_hidden: 32,
            point_cap: 256,
            train_point_cap: 32,
            query_points: 8192,
            noise_sigma: 0.02,
            beta: 1e-4,
            zero_init_grid: false,
            logvar_init: -6.0,
        }
    }
}

impl VaeConfig {
    /// Smaller network sized for single-core CPU training.
    pub fn desk() -> Self {
        Self {
            point_dim: 16,
            voxel_dim: 32,
            encoder_blocks: 2,
            train_point_cap: 16,
            query_points: 4096,
            ..Self::default()
        }
    }

    /// Tiny network for unit tests.
    pub fn tiny() -> Self {
        Self {
            latent_dim: 4,
            feature_dim: 4,
            point_dim: 8,
            voxel_dim: 8,
            encoder_blocks: 2,
            decoder_blocks: 1,
            window: 4,
            mlp_ratio: 1,
            color_hidden: 8,
            point_cap: 16,
            train_point_cap: 8,
            query_points: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
            ("point_dim", self.point_dim),
            ("voxel_dim", self.voxel_dim),
            ("window", self.window as usize),
            ("mlp_ratio", self.mlp_ratio),
            ("color_hidden", self.color_hidden),
            ("point_cap", self.point_cap),
            ("train_point_cap", self.train_point_cap),
            ("query_points", self.query_points),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vae.{name} must be positive")));
        }
        if !(self.noise_sigma >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("vae.noise_sigma and vae.beta must be non-negative".into()));
        }
        Ok(())
    }
}
