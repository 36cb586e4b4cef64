//! Grouped autoregressive transformer over 4D VQ tokens, conditioned on a text
//! prompt and a monocular video, with the spatial-temporal container carrying
//! state across groups.

mod generate;
mod layout;
mod model;
mod net;


pub use generate::{sample_token, Generation};
pub use layout::{hash_words, SequenceLayout, Segment, Slot};
pub use model::{camera_rays, chunked_ce, video_tokens, StarExample, StarModel, StarStepStats, StarTrainer};
pub use net::{StarInput, StarNet, StarOutput};

use crate::config::config_section;
use crate::error::{invalid, Result};
use crate::vq4d::VqConfig;

/// The neutral prompt used when no caption is given.
pub const NEUTRAL_PROMPT: &str = "Generate object of the following <imgs>";

config_section! {
    /// Decoder size and conditioning options.
    pub struct StarConfig ("star") {
        dim: usize = 128,
        layers: usize = 4,
        heads: usize = 4,
        ffn_hidden: usize = 256,
        /// Hash buckets of the word vocabulary.
        text_buckets: usize = 1024,
        text_dim: usize = 64,
        /// Sinusoidal width fed to the timestep projection.
        time_dim: usize = 32,
        max_context: usize = 768,
        /// `prefix`, `additive` or `none`.
        container: String = "prefix".to_string(),
        seed: u64 = 0,
    }
}

config_section! {
    /// Token-grid geometry the decoder is built for, taken from the VQ-VAE.
    pub struct StarDims ("star_dims") {
        timesteps: usize = 4,
        views: usize = 4,
        latent_h: usize = 4,
        latent_w: usize = 4,
        chunks: usize = 2,
        vocab: usize = 512,
    }
}

/// How container conditioning enters the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContainerMode {
    /// Extra attendable key/value entries, visible from the group they condition onwards.
    Prefix,
    /// Mean conditioning vector added to the inputs that predict the group.
    Additive,
    /// No container.
    None,
}

impl StarConfig {
    pub fn mode(&self) -> Result<ContainerMode> {
        match self.container.as_str() {
            "prefix" => Ok(ContainerMode::Prefix),
            "additive" => Ok(ContainerMode::Additive),
            "none" => Ok(ContainerMode::None),
            other => Err(invalid!("star.container must be prefix, additive or none, got `{other}`")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid!("star.dim {} must be a positive multiple of star.heads {}", self.dim, self.heads));
        }
        if self.layers == 0 || self.ffn_hidden == 0 || self.text_buckets == 0 || self.text_dim == 0 {
            return Err(invalid!("star.layers, ffn_hidden, text_buckets and text_dim must be positive"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(invalid!("star.time_dim must be an even number ≥ 2"));
        }
        self.mode()?;
        Ok(())
    }
}

impl StarDims {
    pub fn from_vq(c: &VqConfig) -> Self {
        Self {
            timesteps: c.timesteps,
            views: c.views,
            latent_h: c.latent_h(),
            latent_w: c.latent_w(),
            chunks: c.chunks,
            vocab: c.codebook_size,
        }
    }

    pub fn spatial(&self) -> usize {
        self.latent_h * self.latent_w
    }

    /// Tokens per group, `V·h·w·n`.
    pub fn group_len(&self) -> usize {
        self.views * self.spatial() * self.chunks
    }

    /// Video prefix tokens, `T·h·w·n`.
    pub fn video_len(&self) -> usize {
        self.timesteps * self.spatial() * self.chunks
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.views == 0 || self.spatial() == 0 || self.chunks == 0 {
            return Err(invalid!("token grid dimensions must be positive"));
        }
        if self.vocab < 2 {
            return Err(invalid!("vocabulary needs at least 2 entries"));
        }
        Ok(())
    }
}
