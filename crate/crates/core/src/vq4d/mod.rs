//! 4D VQ-VAE: per-view encoder, multi-chunk quantizer, token factorization,
//! static Gaussian generation, spatial-temporal offset prediction and the training loss.

pub mod gaussians;
mod loss;
mod net;
mod quant;
mod tokens;
mod train;

#[cfg(test)]
mod tests;

pub use gaussians::{
    apply_offsets, DynamicGaussians, Gaussian, GaussianFrame, GaussianOffset, OffsetFeatures, PARAM_DIM,
};
pub use loss::{vae_loss, Discriminator, LossParts, LossWeights};
pub use net::{Decoded, GaussianVars, Vq4dNet};
pub use quant::{dequantize, nearest_entry, quantize, Codebook};
pub use tokens::TokenGrid;
pub use train::{render_dynamic, StepStats, Vq4dModel, Vq4dTrainer};

use crate::config::config_section;
use crate::error::{invalid, Result};

config_section! {
    /// Architecture and loss settings of the 4D VQ-VAE.
    pub struct VqConfig ("vq4d") {
        timesteps: usize = 4,
        views: usize = 4,
        height: usize = 32,
        width: usize = 32,
        /// Latent vector size `d`.
        latent_dim: usize = 64,
        /// Number of chunks `n` each latent vector is split into.
        chunks: usize = 2,
        /// Entries per sub-codebook `K_c`.
        codebook_size: usize = 512,
        /// Continuous token size `C`.
        token_dim: usize = 64,
        heads: usize = 4,
        enc_channels: usize = 32,
        gaussians: usize = 256,
        voxel_res: usize = 16,
        unet_channels: usize = 16,
        /// Half-size of the cube voxelized by the offset refiner, world units.
        volume_extent: f64 = 1.0,
        init_scale: f64 = 0.08,
        stop: bool = true,
        commitment: f64 = 0.25,
        loss_alpha: f64 = 1.0,
        loss_beta: f64 = 0.0,
        loss_gamma: f64 = 0.1,
        /// Codebook entries unused for this many steps are reset to encoder outputs.
        reinit_interval: u64 = 100,
        /// Fraction of training after which resets stop.
        reinit_stop: f64 = 0.5,
        background: [f64; 3] = [1.0, 1.0, 1.0],
        seed: u64 = 0,
    }
}

impl VqConfig {
    pub fn latent_h(&self) -> usize {
        self.height / 8
    }

    pub fn latent_w(&self) -> usize {
        self.width / 8
    }

    /// Token positions per view, `N = h·w`.
    pub fn positions(&self) -> usize {
        self.latent_h() * self.latent_w()
    }

    pub fn chunk_dim(&self) -> usize {
        self.latent_dim / self.chunks
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(invalid!(
                "image size {}×{} must be a positive multiple of 8",
                self.height,
                self.width
            ));
        }
        if self.timesteps == 0 || self.views == 0 {
            return Err(invalid!("vq4d.timesteps and vq4d.views must be positive"));
        }
        if self.chunks == 0 || self.latent_dim % self.chunks != 0 {
            return Err(invalid!("latent_dim {} not divisible by {} chunks", self.latent_dim, self.chunks));
        }
        if self.codebook_size < 2 {
            return Err(invalid!("codebook_size must be at least 2"));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(invalid!("token_dim {} not divisible by {} heads", self.token_dim, self.heads));
        }
        if self.gaussians == 0 || self.voxel_res < 2 || self.voxel_res % 2 != 0 {
            return Err(invalid!("gaussians must be positive and voxel_res an even number ≥ 2"));
        }
        if [self.loss_alpha, self.loss_beta, self.loss_gamma, self.commitment].iter().any(|w| *w < 0.0) {
            return Err(invalid!("loss weights must be non-negative"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid!("background must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Pre-quantization encoder output, layout `(t, v, y, x, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub timesteps: usize,
    pub views: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl LatentGrid {
    pub fn vectors(&self) -> usize {
        self.timesteps * self.views * self.h * self.w
    }

    pub fn slice(&self, t: usize, v: usize) -> &[f32] {
        let n = self.h * self.w * self.dim;
        let o = (t * self.views + v) * n;
        &self.data[o..o + n]
    }
}

/// Continuous tokens `S`, layout `(t, v, position, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousTokens {
    pub timesteps: usize,
    pub views: usize,
    pub positions: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl ContinuousTokens {
    pub fn slice(&self, t: usize, v: usize) -> &[f32] {
        let n = self.positions * self.dim;
        let o = (t * self.views + v) * n;
        &self.data[o..o + n]
    }
}
