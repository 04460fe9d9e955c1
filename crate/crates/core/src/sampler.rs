//! Generation loop for both schedule families with classifier-free guidance
//! and the nursing hooks. Per sampling step `s`:
//! (a) IterRef if `s` is the refinement step, (b) one guidance step if `s` is
//! in the guidance range, (c) the guided prediction, (d) the family update.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::pipeline;
use crate::error::{Error, Result};
use crate::model::checkpoint::{decode_single_tensor, encode_tensor};
use crate::model::train::standard_normal;
use crate::model::{embed_prompt, forward, AttentionStack, ModelParams, Prediction, TextEmbedding};
use crate::nursing::{gsn_guidance, iter_refine, total_loss, NursingConfig, ShiftTrace};
use crate::scenes::{from_json, null_prompt, to_json, PromptSpec};
use crate::schedules::{estimate_x0, Family, ScheduleTable, StepRef};
use crate::tensor::{GridShape, Latent, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub family: Family,
    pub sampling_steps: usize,
    pub cfg_scale: f64,
    pub nursing: NursingConfig,
    pub capture_x0hat: bool,
    /// Global seed mixed into every per-generation noise stream.
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self, table: &ScheduleTable) -> Result<()> {
        if table.family() != self.family {
            return Err(Error::Config(format!(
                "sampler family {:?} does not match schedule family {:?}",
                self.family,
                table.family()
            )));
        }
        if table.num_sampling_steps() != self.sampling_steps {
            return Err(Error::Config(format!(
                "sampler expects {} steps, schedule has {}",
                self.sampling_steps,
                table.num_sampling_steps()
            )));
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::Config("guidance scale must be nonnegative".into()));
        }
        self.nursing.validate(self.sampling_steps)
    }

    /// Hash of the serialized configuration, stored in every record.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::scenes::hash_hex(json.as_bytes())
    }
}

/// `uncond + g·(cond − uncond)`; the attention comes from the conditional
/// pass. At `g = 1` the unconditional pass is skipped.
pub fn cfg_predict<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    cond: &TextEmbedding<T>,
    null: &TextEmbedding<T>,
    g: f64,
) -> Result<(Prediction<T>, AttentionStack<T>)> {
    let (cond_pred, attn) = forward(params, x_t, t_norm, cond)?;
    if g == 1.0 {
        return Ok((cond_pred, attn));
    }
    let (uncond_pred, _) = forward(params, x_t, t_norm, null)?;
    let grid = guide(&uncond_pred.grid, &cond_pred.grid, g)?;
    Ok((
        Prediction {
            grid,
            kind: cond_pred.kind,
        },
        attn,
    ))
}

/// Elementwise `u + g·(c − u)`; exact at `g = 0` and `g = 1`.
pub fn guide<T: Real>(uncond: &Latent<T>, cond: &Latent<T>, g: f64) -> Result<Latent<T>> {
    uncond.ensure_same_shape(cond)?;
    if g == 0.0 {
        return Ok(uncond.clone());
    }
    if g == 1.0 {
        return Ok(cond.clone());
    }
    let g = T::lit(g);
    let data = uncond
        .data()
        .iter()
        .zip(cond.data())
        .map(|(&u, &c)| u + g * (c - u))
        .collect();
    Latent::from_vec(uncond.shape(), data)
}

/// One ancestral DDPM update from `from` to the following step `to`. The
/// terminal update returns `x̂₀` without noise.
pub fn ddpm_step<T: Real>(
    x_t: &Latent<T>,
    pred: &Prediction<T>,
    from: StepRef,
    to: StepRef,
    table: &ScheduleTable,
    rng: &mut impl Rng,
) -> Result<Latent<T>> {
    if table.family() != Family::Diffusion {
        return Err(Error::Contract(
            "ddpm_step needs a diffusion schedule".into(),
        ));
    }
    if to.training_step >= from.training_step || to.sampling_index != from.sampling_index + 1 {
        return Err(Error::Contract(format!(
            "ddpm step must move to the next sampling step: {from:?} -> {to:?}"
        )));
    }
    let x0 = estimate_x0(x_t, pred, from, table)?;
    if to.training_step == 0 {
        return Ok(x0);
    }
    let ab_t = table.alpha_bar_at(from.training_step);
    let ab_prev = table.alpha_bar_at(to.training_step);
    let beta = 1.0 - ab_t / ab_prev;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let c1 = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let std = (posterior_variance(ab_t, ab_prev)).sqrt();
    let noise: Latent<T> = standard_normal(x_t.shape(), rng);
    let (c0, c1, std) = (T::lit(c0), T::lit(c1), T::lit(std));
    let data = x0
        .data()
        .iter()
        .zip(x_t.data())
        .zip(noise.data())
        .map(|((&a, &x), &z)| c0 * a + c1 * x + std * z)
        .collect();
    Latent::from_vec(x_t.shape(), data)
}

/// `β̃·(1 − ᾱ_{t'})/(1 − ᾱ_t)` with `β̃ = 1 − ᾱ_t/ᾱ_{t'}`.
pub fn posterior_variance(ab_t: f64, ab_prev: f64) -> f64 {
    (1.0 - ab_t / ab_prev) * (1.0 - ab_prev) / (1.0 - ab_t)
}

/// `x_{τ'} = x_τ + (τ − τ')·û`.
pub fn euler_flow_step<T: Real>(
    x: &Latent<T>,
    pred: &Prediction<T>,
    tau: f64,
    tau_next: f64,
) -> Result<Latent<T>> {
    if tau_next > tau {
        return Err(Error::Contract(format!(
            "flow step must not increase time: {tau} -> {tau_next}"
        )));
    }
    x.lincomb(T::one(), &pred.grid, T::lit(tau - tau_next))
}

/// Noise streams for one generation: stream 0 is the initial latent, stream
/// `s + 1` the ancestral noise of sampling step `s`.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    key: [u8; 32],
}

impl NoiseSource {
    pub fn new(global_seed: u64, prompt_id: &str, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(global_seed.to_le_bytes());
        h.update((prompt_id.len() as u64).to_le_bytes());
        h.update(prompt_id.as_bytes());
        h.update(seed.to_le_bytes());
        Self {
            key: h.finalize().into(),
        }
    }

    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }

    pub fn initial<T: Real>(&self, shape: GridShape) -> Latent<T> {
        standard_normal(shape, &mut self.stream(0))
    }
}

/// A paused trajectory: the latent entering sampling step `step`, before any
/// hook at that step runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState<T> {
    pub step: usize,
    pub x: Latent<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub prompt_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub final_latent: Option<Latent<f32>>,
    /// x̂₀ after the prediction of each sampling step, when captured.
    pub snapshots: Vec<Latent<f32>>,
    pub iterref: Option<ShiftTrace>,
    pub guidance: Vec<GuidanceLoss>,
    /// Nursing loss of the conditional attention at each sampling step run.
    pub step_losses: Vec<f64>,
    pub updates: usize,
    pub failure: Option<Failure>,
}

struct Context<'a, T> {
    params: &'a ModelParams<T>,
    prompt: &'a PromptSpec,
    table: &'a ScheduleTable,
    cfg: &'a SamplerConfig,
    cond: TextEmbedding<T>,
    null: TextEmbedding<T>,
    noise: NoiseSource,
}

pub fn generate<T: Real>(
    params: &ModelParams<T>,
    prompt: &PromptSpec,
    table: &ScheduleTable,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<GenerationRecord> {
    generate_from(params, prompt, table, cfg, seed, None, &[]).map(|(r, _)| r)
}

/// [`generate`], optionally resuming from a paused state and returning the
/// states entering each of `pause_at`. A resumed run reproduces the tail of
/// the full run exactly; its record covers only the steps it executed.
pub fn generate_from<T: Real>(
    params: &ModelParams<T>,
    prompt: &PromptSpec,
    table: &ScheduleTable,
    cfg: &SamplerConfig,
    seed: u64,
    resume: Option<SamplerState<T>>,
    pause_at: &[usize],
) -> Result<(GenerationRecord, Vec<SamplerState<T>>)> {
    cfg.validate(table)?;
    let ctx = Context {
        params,
        prompt,
        table,
        cfg,
        cond: embed_prompt(params, prompt)?,
        null: embed_prompt(params, &null_prompt())?,
        noise: NoiseSource::new(cfg.seed, &prompt.id, seed),
    };
    let (start, x) = match resume {
        Some(state) => (state.step, state.x),
        None => (0, ctx.noise.initial(params.config.grid)),
    };
    let mut record = GenerationRecord {
        prompt_id: prompt.id.clone(),
        seed,
        config_hash: cfg.hash(),
        final_latent: None,
        snapshots: Vec::new(),
        iterref: None,
        guidance: Vec::new(),
        step_losses: Vec::new(),
        updates: 0,
        failure: None,
    };
    let mut paused = Vec::new();
    let x = run_steps(&ctx, start, x, &mut record, pause_at, &mut paused)?;
    record.final_latent = Some(x.cast());
    Ok((record, paused))
}

fn run_steps<T: Real>(
    ctx: &Context<'_, T>,
    start: usize,
    mut x: Latent<T>,
    record: &mut GenerationRecord,
    pause_at: &[usize],
    paused: &mut Vec<SamplerState<T>>,
) -> Result<Latent<T>> {
    let nursing = &ctx.cfg.nursing;
    let has_subjects = !ctx.prompt.entities.is_empty();
    for s in start..ctx.table.num_sampling_steps() {
        let at = |e: Error| Error::AtStep {
            step: s,
            source: Box::new(e),
        };
        if pause_at.contains(&s) {
            paused.push(SamplerState {
                step: s,
                x: x.clone(),
            });
        }
        let step = ctx.table.map_sampling_step(s)?;
        let t_norm = ctx.table.normalized_time(step);
        if has_subjects && nursing.iterref_step == Some(s) {
            let (next, trace) =
                iter_refine(ctx.params, &x, t_norm, &ctx.cond, ctx.prompt, nursing).map_err(at)?;
            x = next;
            record.updates += nursing.n_shifts;
            record.iterref = Some(trace);
        }
        if has_subjects && nursing.gsng_active(s) {
            let (next, loss) =
                gsn_guidance(ctx.params, &x, t_norm, &ctx.cond, ctx.prompt, nursing).map_err(at)?;
            x = next;
            record.updates += 1;
            record.guidance.push(GuidanceLoss {
                step: s,
                loss: loss.total,
            });
        }
        let (pred, attn) = cfg_predict(
            ctx.params,
            &x,
            t_norm,
            &ctx.cond,
            &ctx.null,
            ctx.cfg.cfg_scale,
        )
        .map_err(at)?;
        if has_subjects {
            let (maps, _) = pipeline(&attn, ctx.prompt).map_err(at)?;
            record
                .step_losses
                .push(total_loss(&maps, nursing.loss_terms).map_err(at)?.total);
        }
        if ctx.cfg.capture_x0hat {
            record
                .snapshots
                .push(estimate_x0(&x, &pred, step, ctx.table).map_err(at)?.cast());
        }
        let next = ctx.table.next(step);
        x = match ctx.table.family() {
            Family::Diffusion => {
                let mut rng = ctx.noise.stream(s as u64 + 1);
                ddpm_step(&x, &pred, step, next, ctx.table, &mut rng)
            }
            Family::Flow => euler_flow_step(
                &x,
                &pred,
                ctx.table.normalized_time(step),
                ctx.table.normalized_time(next),
            ),
        }
        .map_err(at)?;
    }
    Ok(x)
}

/// Runs [`generate`] and converts a failure into a record that marks the
/// failing step instead of aborting the batch.
pub fn generate_or_mark<T: Real>(
    params: &ModelParams<T>,
    prompt: &PromptSpec,
    table: &ScheduleTable,
    cfg: &SamplerConfig,
    seed: u64,
) -> GenerationRecord {
    match generate(params, prompt, table, cfg, seed) {
        Ok(r) => r,
        Err(e) => GenerationRecord::failed(prompt, seed, cfg, &e),
    }
}

impl GenerationRecord {
    pub fn failed(prompt: &PromptSpec, seed: u64, cfg: &SamplerConfig, err: &Error) -> Self {
        let step = match err {
            Error::AtStep { step, .. } => *step,
            _ => 0,
        };
        Self {
            prompt_id: prompt.id.clone(),
            seed,
            config_hash: cfg.hash(),
            final_latent: None,
            snapshots: Vec::new(),
            iterref: None,
            guidance: Vec::new(),
            step_losses: Vec::new(),
            updates: 0,
            failure: Some(Failure {
                step,
                message: err.to_string(),
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    prompt_id: String,
    seed: u64,
    config_hash: String,
    final_latent: Option<String>,
    snapshots: Vec<String>,
    iterref: Option<ShiftTrace>,
    guidance: Vec<GuidanceLoss>,
    step_losses: Vec<f64>,
    updates: usize,
    failure: Option<Failure>,
}

pub fn encode_latent(name: &str, latent: &Latent<f32>) -> String {
    let shape = latent.shape();
    let mut bytes = Vec::new();
    encode_tensor(
        &mut bytes,
        name,
        &[shape.h, shape.w, shape.c],
        latent.data(),
    );
    B64.encode(bytes)
}

pub fn decode_latent(text: &str) -> Result<Latent<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Parse(format!("latent payload: {e}")))?;
    let (_, (dims, data)) = decode_single_tensor(&bytes)?;
    if dims.len() != 3 {
        return Err(Error::Parse(format!("latent tensor has dims {dims:?}")));
    }
    Latent::from_vec(GridShape::new(dims[0], dims[1], dims[2]), data)
}

impl GenerationRecord {
    pub fn to_line(&self) -> Result<String> {
        let line = RecordLine {
            prompt_id: self.prompt_id.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            final_latent: self
                .final_latent
                .as_ref()
                .map(|l| encode_latent("final", l)),
            snapshots: self
                .snapshots
                .iter()
                .enumerate()
                .map(|(i, l)| encode_latent(&format!("x0hat.{i}"), l))
                .collect(),
            iterref: self.iterref.clone(),
            guidance: self.guidance.clone(),
            step_losses: self.step_losses.clone(),
            updates: self.updates,
            failure: self.failure.clone(),
        };
        to_json(&line)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let r: RecordLine = from_json(line)?;
        Ok(Self {
            prompt_id: r.prompt_id,
            seed: r.seed,
            config_hash: r.config_hash,
            final_latent: r.final_latent.as_deref().map(decode_latent).transpose()?,
            snapshots: r
                .snapshots
                .iter()
                .map(|s| decode_latent(s))
                .collect::<Result<_>>()?,
            iterref: r.iterref,
            guidance: r.guidance,
            step_losses: r.step_losses,
            updates: r.updates,
            failure: r.failure,
        })
    }
}

pub fn write_records(mut out: impl Write, records: &[GenerationRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_line()?)?;
    }
    Ok(())
}

pub fn read_records(input: impl BufRead) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(GenerationRecord::from_line(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PredictionKind};
    use crate::scenes::{Entity, PromptKind, Shape};
    use crate::schedules::ScheduleConfig;

    fn scalar(v: f64) -> Latent<f64> {
        Latent::from_vec(GridShape::new(1, 1, 1), vec![v]).unwrap()
    }

    fn model(prediction: PredictionKind) -> ModelParams<f64> {
        let cfg = ModelConfig {
            grid: GridShape::new(4, 4, 3),
            d: 8,
            prediction,
            ..ModelConfig::default()
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap()
    }

    fn prompt() -> PromptSpec {
        PromptSpec::new(
            PromptKind::Two,
            vec![
                Entity {
                    shape: Shape::Disk,
                    color: None,
                },
                Entity {
                    shape: Shape::Hbar,
                    color: None,
                },
            ],
        )
        .unwrap()
    }

    fn config(table: &ScheduleTable, nursing: NursingConfig) -> SamplerConfig {
        SamplerConfig {
            family: table.family(),
            sampling_steps: table.num_sampling_steps(),
            cfg_scale: 7.5,
            nursing,
            capture_x0hat: false,
            seed: 3,
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let g = guide(&scalar(0.0), &scalar(0.2), 7.5).unwrap();
        assert!((g.data()[0] - 1.5).abs() < 1e-12);
        let (u, c) = (scalar(0.3), scalar(-0.7));
        assert_eq!(guide(&u, &c, 0.0).unwrap(), u);
        assert_eq!(guide(&u, &c, 1.0).unwrap(), c);
    }

    #[test]
    fn guided_prediction_endpoints_are_exact() {
        let params = model(PredictionKind::Epsilon);
        let p = prompt();
        let cond = embed_prompt(&params, &p).unwrap();
        let null = embed_prompt(&params, &null_prompt()).unwrap();
        let x = NoiseSource::new(0, "x", 0).initial::<f64>(params.config.grid);
        let (c, _) = forward(&params, &x, 0.4, &cond).unwrap();
        let (u, _) = forward(&params, &x, 0.4, &null).unwrap();
        assert_eq!(
            cfg_predict(&params, &x, 0.4, &cond, &null, 1.0).unwrap().0,
            c
        );
        assert_eq!(
            cfg_predict(&params, &x, 0.4, &cond, &null, 0.0)
                .unwrap()
                .0
                .grid,
            u.grid
        );
    }

    #[test]
    fn euler_arithmetic() {
        let pred = Prediction {
            grid: scalar(-0.2),
            kind: PredictionKind::Velocity,
        };
        let x = euler_flow_step(&scalar(0.5), &pred, 0.75, 0.5).unwrap();
        assert!((x.data()[0] - 0.45).abs() < 1e-12);
        assert_eq!(
            euler_flow_step(&scalar(0.5), &pred, 0.3, 0.3).unwrap(),
            scalar(0.5)
        );
        assert!(euler_flow_step(&scalar(0.5), &pred, 0.3, 0.4).is_err());
    }

    #[test]
    fn euler_single_step_with_oracle_velocity_lands_on_data() {
        let shape = GridShape::new(2, 2, 3);
        let x0 = NoiseSource::new(1, "a", 0).initial::<f64>(shape);
        let eps = NoiseSource::new(1, "b", 0).initial::<f64>(shape);
        let u = x0.lincomb(1.0, &eps, -1.0).unwrap();
        let out = euler_flow_step(
            &eps,
            &Prediction {
                grid: u,
                kind: PredictionKind::Velocity,
            },
            1.0,
            0.0,
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_terminal_step_with_oracle_noise_returns_data() {
        let table = ScheduleConfig::diffusion().build().unwrap();
        let shape = GridShape::new(2, 2, 3);
        let x0 = NoiseSource::new(1, "a", 0).initial::<f64>(shape);
        let eps = NoiseSource::new(1, "b", 0).initial::<f64>(shape);
        let last = table
            .map_sampling_step(table.num_sampling_steps() - 1)
            .unwrap();
        let x_t = crate::schedules::forward_corrupt(&x0, &eps, last, &table).unwrap();
        let pred = Prediction {
            grid: eps,
            kind: PredictionKind::Epsilon,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = ddpm_step(&x_t, &pred, last, table.next(last), &table, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ddpm_step_is_deterministic_and_noisy_in_between() {
        let table = ScheduleConfig::diffusion().build().unwrap();
        let s = table.map_sampling_step(10).unwrap();
        let ab = table.alpha_bar_at(s.training_step);
        let ab_prev = table.alpha_bar_at(table.next(s).training_step);
        assert!(posterior_variance(ab, ab_prev) > 0.0);
        let x = NoiseSource::new(1, "a", 0).initial::<f64>(GridShape::new(2, 2, 3));
        let pred = Prediction {
            grid: x.clone(),
            kind: PredictionKind::Epsilon,
        };
        let run = || {
            ddpm_step(
                &x,
                &pred,
                s,
                table.next(s),
                &table,
                &mut ChaCha8Rng::seed_from_u64(5),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn baseline_generation_is_deterministic() {
        let params = model(PredictionKind::Epsilon);
        let table = ScheduleConfig::diffusion().build().unwrap();
        let cfg = config(&table, NursingConfig::disabled());
        let a = generate(&params, &prompt(), &table, &cfg, 4).unwrap();
        let b = generate(&params, &prompt(), &table, &cfg, 4).unwrap();
        assert_eq!(a, b);
        let c = generate(&params, &prompt(), &table, &cfg, 5).unwrap();
        assert_ne!(a.final_latent, c.final_latent);
        assert_eq!(a.updates, 0);
    }

    #[test]
    fn update_counts_follow_the_presets() {
        let params = model(PredictionKind::Epsilon);
        let table = ScheduleConfig::diffusion().build().unwrap();
        let ours = generate(
            &params,
            &prompt(),
            &table,
            &config(&table, NursingConfig::ours()),
            0,
        )
        .unwrap();
        assert_eq!(ours.updates, 50);
        assert_eq!(ours.iterref.as_ref().map(|t| t.len()), Some(51));
        let plus = generate(
            &params,
            &prompt(),
            &table,
            &config(&table, NursingConfig::ours_plus()),
            0,
        )
        .unwrap();
        assert_eq!(plus.updates, 72);
        assert_eq!(plus.guidance.len(), 22);
        assert_eq!(plus.guidance.first().map(|g| g.step), Some(3));
        assert_eq!(plus.guidance.last().map(|g| g.step), Some(24));
    }

    #[test]
    fn resumed_run_matches_the_full_run() {
        let params = model(PredictionKind::Epsilon);
        let table = ScheduleConfig::diffusion().build().unwrap();
        let base = config(&table, NursingConfig::disabled());
        let nursed = config(
            &table,
            NursingConfig {
                n_shifts: 5,
                ..NursingConfig::ours()
            },
        );
        let p = prompt();
        let (_, states) = generate_from(&params, &p, &table, &base, 2, None, &[8]).unwrap();
        assert_eq!(states.len(), 1);
        let (resumed, _) = generate_from(
            &params,
            &p,
            &table,
            &nursed,
            2,
            states.into_iter().next(),
            &[],
        )
        .unwrap();
        let full = generate(&params, &p, &table, &nursed, 2).unwrap();
        assert_eq!(resumed.final_latent, full.final_latent);
        assert_eq!(resumed.iterref, full.iterref);
    }

    #[test]
    fn last_snapshot_matches_the_output() {
        let params = model(PredictionKind::Epsilon);
        let table = ScheduleConfig::diffusion().build().unwrap();
        let cfg = SamplerConfig {
            capture_x0hat: true,
            ..config(&table, NursingConfig::disabled())
        };
        let rec = generate(&params, &prompt(), &table, &cfg, 1).unwrap();
        assert_eq!(rec.snapshots.len(), 50);
        let out = rec.final_latent.as_ref().unwrap();
        let gap = rec.snapshots[49]
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(gap <= 1e-5);
    }

    #[test]
    fn flow_sampler_runs_the_scaled_presets() {
        let params = model(PredictionKind::Velocity);
        let table = ScheduleConfig::flow().build().unwrap();
        let s = table.num_sampling_steps();
        let cfg = config(&table, NursingConfig::ours_plus().scaled_to(s));
        let rec = generate(&params, &prompt(), &table, &cfg, 0).unwrap();
        assert_eq!(rec.updates, cfg.nursing.update_budget());
        assert!(rec
            .final_latent
            .unwrap()
            .data()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn records_round_trip_through_json_lines() {
        let params = model(PredictionKind::Epsilon);
        let table = ScheduleConfig::diffusion().build().unwrap();
        let cfg = SamplerConfig {
            capture_x0hat: true,
            ..config(&table, NursingConfig::ours_plus())
        };
        let rec = generate(&params, &prompt(), &table, &cfg, 0).unwrap();
        let rec = GenerationRecord {
            final_latent: rec.final_latent.clone(),
            ..rec
        };
        let back = GenerationRecord::from_line(&rec.to_line().unwrap()).unwrap();
        assert_eq!(back, rec);

        let failed = GenerationRecord::failed(
            &prompt(),
            3,
            &cfg,
            &Error::AtStep {
                step: 7,
                source: Box::new(Error::numeric("x")),
            },
        );
        assert_eq!(failed.failure.as_ref().map(|f| f.step), Some(7));
        assert_eq!(
            GenerationRecord::from_line(&failed.to_line().unwrap()).unwrap(),
            failed
        );
    }
}
