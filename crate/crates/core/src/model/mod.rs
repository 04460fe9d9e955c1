//! Toy text-conditioned denoiser: per-pixel tokens, sinusoidal time input,
//! a small text table, and either cross-attention blocks or joint
//! image‖text attention blocks. No normalization layers. Reverse mode is
//! written out per layer in [`backward`].

mod backward;
pub mod checkpoint;
mod forward;
mod params;
pub mod train;

use serde::{Deserialize, Serialize};

pub use backward::{vjp_wrt_latent, Cotangents, Objective};
pub use forward::{forward, forward_cached, ForwardCache};
pub use params::{ModelParams, Tensor};

use crate::error::{Error, Result};
use crate::scenes::{PromptSpec, PAD, PROMPT_LEN, SCENE_SHAPE, VOCAB_SIZE};
use crate::tensor::{GridShape, Latent, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wiring {
    Cross,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Epsilon,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridShape,
    pub d: usize,
    pub n_head: usize,
    pub blocks: usize,
    pub vocab: usize,
    pub n_tokens: usize,
    pub time_freqs: usize,
    pub wiring: Wiring,
    pub prediction: PredictionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: SCENE_SHAPE,
            d: 32,
            n_head: 2,
            blocks: 2,
            vocab: VOCAB_SIZE,
            n_tokens: PROMPT_LEN,
            time_freqs: 8,
            wiring: Wiring::Cross,
            prediction: PredictionKind::Epsilon,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_head == 0 || self.d % self.n_head != 0 {
            return Err(Error::Config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d, self.n_head
            )));
        }
        if self.blocks == 0 || self.grid.is_empty() || self.n_tokens == 0 || self.vocab == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.grid.pixels()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_head
    }

    /// Sequence length seen by the attention layers of one block.
    pub fn joint_len(&self) -> usize {
        self.pixels() + self.n_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub grid: Latent<T>,
    pub kind: PredictionKind,
}

/// Which rows/columns of a captured attention matrix are image tokens and
/// which are text tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub image_rows: std::ops::Range<usize>,
    pub text_cols: std::ops::Range<usize>,
    /// `(height, width)` of the image rows, row-major.
    pub image_grid: (usize, usize),
}

/// Attention probabilities per block and head. Each `maps[b]` is laid out
/// `[head][row][col]` with `rows × cols` per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack<T> {
    pub wiring: Wiring,
    pub n_head: usize,
    pub rows: usize,
    pub cols: usize,
    pub maps: Vec<Vec<T>>,
    pub provenance: Option<Provenance>,
}

impl<T: Real> AttentionStack<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            maps: self.maps.iter().map(|m| vec![T::zero(); m.len()]).collect(),
            ..self.clone()
        }
    }

    pub fn head(&self, block: usize, head: usize) -> &[T] {
        let n = self.rows * self.cols;
        &self.maps[block][head * n..(head + 1) * n]
    }
}

/// Text tokens after the table lookup, with the key mask that hides PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: Vec<u32>,
    pub data: Vec<T>,
    pub mask: Vec<bool>,
    pub d: usize,
}

impl<T: Real> TextEmbedding<T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn embed_prompt<T: Real>(
    params: &ModelParams<T>,
    prompt: &PromptSpec,
) -> Result<TextEmbedding<T>> {
    embed_tokens(params, &prompt.tokens)
}

pub fn embed_tokens<T: Real>(params: &ModelParams<T>, tokens: &[u32]) -> Result<TextEmbedding<T>> {
    let cfg = &params.config;
    if tokens.len() != cfg.n_tokens {
        return Err(Error::shape(cfg.n_tokens, tokens.len()));
    }
    let d = cfg.d;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (j, &t) in tokens.iter().enumerate() {
        if t as usize >= cfg.vocab {
            return Err(Error::Vocabulary {
                id: t,
                vocab: cfg.vocab,
            });
        }
        let row = &params.tok.data[t as usize * d..(t as usize + 1) * d];
        let pos = &params.text_pos.data[j * d..(j + 1) * d];
        data.extend(row.iter().zip(pos).map(|(&a, &b)| a + b));
    }
    Ok(TextEmbedding {
        tokens: tokens.to_vec(),
        data,
        mask: tokens.iter().map(|&t| t != PAD).collect(),
        d,
    })
}

/// `[sin(ω_k·t), cos(ω_k·t)]` with `t` the corruption time in steps-of-1000
/// and `ω_k = 1000^(-k/F)`.
pub fn time_features(t_norm: f64, freqs: usize) -> Vec<f64> {
    let t = t_norm * 1000.0;
    let mut out = Vec::with_capacity(2 * freqs);
    for k in 0..freqs {
        let w = (-(1000f64.ln()) * k as f64 / freqs as f64).exp();
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}
