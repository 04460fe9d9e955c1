//! Latent nursing laboratory: toy diffusion and flow-matching denoisers whose
//! noisy latents are optimized against their own cross-attention maps at a
//! chosen sampling step, plus the sweep protocol that picks that step.

pub mod attention;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nursing;
pub mod optim;
pub mod sampler;
pub mod scenes;
pub mod schedules;
pub mod tensor;

pub use error::{Error, Result};
