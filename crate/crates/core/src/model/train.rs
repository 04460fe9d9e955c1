//! Minibatch Adam training on the denoising objectives, with condition drop
//! so the same network also serves as the unconditional branch for guidance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::backward::{backward, Cotangents};
use super::forward::forward_cached;
use super::{embed_prompt, ModelParams, PredictionKind};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamMoments};
use crate::scenes::{null_prompt, render_scene, sample_scene, DatasetManifest, PromptSpec};
use crate::schedules::{Family, ScheduleTable};
use crate::tensor::{Latent, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub objective: PredictionKind,
    pub cond_drop: f64,
    pub seed: u64,
    /// Number of rendered scenes in the training set, drawn round-robin
    /// from the manifest prompts.
    pub scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            objective: PredictionKind::Epsilon,
            cond_drop: 0.1,
            seed: 0,
            scenes: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

fn gaussian<T: Real>(shape: crate::tensor::GridShape, rng: &mut impl Rng) -> Latent<T> {
    let data = (0..shape.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Latent::from_vec(shape, data).expect("shape-sized buffer")
}

/// Fills a latent with standard normal noise.
pub fn standard_normal<T: Real>(shape: crate::tensor::GridShape, rng: &mut impl Rng) -> Latent<T> {
    gaussian(shape, rng)
}

pub fn train<T: Real>(
    params0: &ModelParams<T>,
    manifest: &DatasetManifest,
    table: &ScheduleTable,
    cfg: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    train_with_progress(params0, manifest, table, cfg, |_, _| {})
}

pub fn train_with_progress<T: Real>(
    params0: &ModelParams<T>,
    manifest: &DatasetManifest,
    table: &ScheduleTable,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelParams<T>, TrainReport)> {
    if manifest.prompts.is_empty() || cfg.scenes == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&cfg.cond_drop) {
        return Err(Error::Config(format!(
            "condition drop probability {} outside [0, 1)",
            cfg.cond_drop
        )));
    }
    let want = table.family().prediction_kind();
    if cfg.objective != want || params0.config.prediction != want {
        return Err(Error::Config(format!(
            "{:?} schedule needs a {want:?} objective",
            table.family()
        )));
    }

    let mut params = params0.clone();
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok((params, report));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data: Vec<(usize, Latent<T>)> = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let pi = i % manifest.prompts.len();
        let scene = sample_scene(&manifest.prompts[pi], &mut rng)?;
        data.push((pi, render_scene(&scene).cast()));
    }
    let null = null_prompt();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut moments: Vec<AdamMoments<T>> = params
        .tensor_slices_mut()
        .iter()
        .map(|s| AdamMoments::new(s.len()))
        .collect();

    let t_max = table.train_steps();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.zeros_like();
            for &idx in batch {
                let (pi, x0) = &data[idx];
                let prompt: &PromptSpec = if rng.random::<f64>() < cfg.cond_drop {
                    &null
                } else {
                    &manifest.prompts[*pi]
                };
                let text = embed_prompt(&params, prompt)?;
                let step = rng.random_range(1..=t_max);
                let eps: Latent<T> = gaussian(x0.shape(), &mut rng);
                let a = T::lit(table.a_at(step));
                let b = T::lit(table.b_at(step));
                let x_t = x0.lincomb(a, &eps, b)?;
                let target = match table.family() {
                    Family::Diffusion => eps,
                    Family::Flow => x0.lincomb(T::one(), &eps, -T::one())?,
                };
                let t_norm = step as f64 / t_max as f64;
                let (pred, _, cache) = forward_cached(&params, &x_t, t_norm, &text)?;
                let numel = T::lit(target.data().len() as f64);
                let scale = T::lit(2.0) / (numel * T::lit(batch.len() as f64));
                let resid = pred.grid.lincomb(T::one(), &target, -T::one())?;
                let loss: T = resid.data().iter().map(|&r| r * r).sum();
                let d_pred = resid.map(|r| r * scale);
                epoch_loss += (loss / numel).f64();
                let cot = Cotangents {
                    pred: Some(d_pred),
                    attention: None,
                };
                backward(&params, &cache, &cot, Some(&mut grads))?;
            }
            let grad_slices: Vec<Vec<T>> = {
                let mut g = grads;
                g.tensor_slices_mut()
                    .into_iter()
                    .map(|s| s.to_vec())
                    .collect()
            };
            for ((slice, m), g) in params
                .tensor_slices_mut()
                .into_iter()
                .zip(moments.iter_mut())
                .zip(&grad_slices)
            {
                m.update(slice, g, &adam)?;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    if !params.is_finite() {
        return Err(Error::numeric("trained parameters"));
    }
    Ok((params, report))
}
