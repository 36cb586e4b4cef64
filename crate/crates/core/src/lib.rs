//! Spatio-temporal autoregressive 4D object generation at desk scale.
//!
//! Modules, in pipeline order: [`scene_synth`] builds synthetic animated scenes,
//! [`vq4d`] tokenizes their multi-view renders and decodes tokens back into
//! dynamic Gaussians, [`splat_render`] renders those Gaussians, [`st_container`]
//! clusters historical token features, and [`star`] predicts token groups
//! autoregressively. [`pipeline`] ties the stages together.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dual;
pub mod metrics;
pub mod error;
pub mod par;
pub mod pipeline;
pub mod scene_synth;
pub mod splat_render;
pub mod st_container;
pub mod star;
pub mod vq4d;

pub use error::{Error, Result};
