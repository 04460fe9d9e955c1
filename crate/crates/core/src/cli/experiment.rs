//! Dataset construction, training, sweeps and evaluations shared by the
//! subcommands and the acceptance suite.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{detect, tiam, Detection, DetectionTable, EvalResult, SweepResult};
use crate::model::train::{train_with_progress, TrainReport};
use crate::model::ModelParams;
use crate::nursing::NursingConfig;
use crate::sampler::{
    generate_from, generate_or_mark, GenerationRecord, SamplerConfig, SamplerState,
};
use crate::scenes::{
    enumerate_prompts, sample_dataset, split_validation_test, ColorPalette, DatasetManifest,
    EntityVocab, PromptKind, PromptSpec, Split,
};
use crate::schedules::ScheduleTable;

use super::config::RunConfig;

/// Validation and test manifests of one prompt kind.
#[derive(Debug, Clone)]
pub struct KindSplit {
    pub kind: PromptKind,
    pub validation: DatasetManifest,
    pub test: DatasetManifest,
}

#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: DatasetManifest,
    pub kinds: Vec<KindSplit>,
}

pub fn prompt_pool(kind: PromptKind) -> Vec<PromptSpec> {
    enumerate_prompts(kind, &EntityVocab::default(), &ColorPalette::default())
}

pub fn build_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let d = &cfg.data;
    let mut train_pool = Vec::new();
    for &kind in &d.train_kinds {
        train_pool.extend(prompt_pool(kind));
    }
    let train = sample_dataset(&train_pool, train_pool.len(), 0, d.seed, Split::Train)?;
    let kinds = d
        .kinds
        .iter()
        .map(|&kind| {
            let (validation, test) = split_validation_test(
                &prompt_pool(kind),
                d.n_validation,
                d.n_test,
                d.n_seeds,
                d.seed,
            )?;
            Ok(KindSplit {
                kind,
                validation,
                test,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Datasets { train, kinds })
}

pub fn train_model(
    cfg: &RunConfig,
    train: &DatasetManifest,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelParams<f32>, TrainReport)> {
    let table = cfg.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let init = ModelParams::<f32>::init(cfg.model_config(), &mut rng)?;
    train_with_progress(&init, train, &table, &cfg.train_config(), on_epoch)
}

pub fn sampler_config(cfg: &RunConfig, nursing: NursingConfig) -> SamplerConfig {
    SamplerConfig {
        family: cfg.schedule.family,
        sampling_steps: cfg.schedule.sampling_steps,
        cfg_scale: cfg.sampler.cfg_scale,
        nursing,
        capture_x0hat: cfg.sampler.capture_x0hat,
        seed: cfg.sampler.seed,
    }
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Wall time of one generation item, kept apart from the records.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub prompt_id: String,
    pub seed: u64,
    pub seconds: f64,
}

pub fn write_timings(timings: &[Timing], mut out: impl std::io::Write) -> Result<()> {
    writeln!(out, "prompt_id,seed,seconds")?;
    for t in timings {
        writeln!(out, "{},{},{:.4}", t.prompt_id, t.seed, t.seconds)?;
    }
    Ok(())
}

/// Every (prompt, seed) pair of a manifest, prompts outermost.
pub fn items(manifest: &DatasetManifest) -> Vec<(PromptSpec, u64)> {
    manifest
        .prompts
        .iter()
        .flat_map(|p| manifest.seeds.iter().map(move |&s| (p.clone(), s)))
        .collect()
}

/// Generates every item on `workers` threads. Failed generations come back
/// as marked records.
pub fn run_batch(
    params: &ModelParams<f32>,
    table: &ScheduleTable,
    scfg: &SamplerConfig,
    items: &[(PromptSpec, u64)],
    workers: usize,
) -> Result<(Vec<GenerationRecord>, Vec<Timing>)> {
    scfg.validate(table)?;
    let pool = thread_pool(workers)?;
    let out: Vec<(GenerationRecord, Timing)> = pool.install(|| {
        items
            .par_iter()
            .map(|(prompt, seed)| {
                let t0 = Instant::now();
                let rec = generate_or_mark(params, prompt, table, scfg, *seed);
                let timing = Timing {
                    prompt_id: prompt.id.clone(),
                    seed: *seed,
                    seconds: t0.elapsed().as_secs_f64(),
                };
                (rec, timing)
            })
            .collect()
    });
    Ok(out.into_iter().unzip())
}

fn detections_of(record: &GenerationRecord) -> Vec<Detection> {
    record.final_latent.as_ref().map(detect).unwrap_or_default()
}

/// Detection table of a set of records; the result does not depend on the
/// order of `records`.
pub fn detection_table<'a>(
    records: impl IntoIterator<Item = &'a GenerationRecord>,
) -> DetectionTable {
    records
        .into_iter()
        .map(|r| ((r.prompt_id.clone(), r.seed), detections_of(r)))
        .collect()
}

pub struct Evaluation {
    pub result: EvalResult,
    pub records: Vec<GenerationRecord>,
    pub timings: Vec<Timing>,
}

pub fn evaluate(
    params: &ModelParams<f32>,
    table: &ScheduleTable,
    scfg: &SamplerConfig,
    manifest: &DatasetManifest,
    workers: usize,
) -> Result<Evaluation> {
    let (records, timings) = run_batch(params, table, scfg, &items(manifest), workers)?;
    let result = tiam(manifest, &detection_table(&records))?;
    Ok(Evaluation {
        result,
        records,
        timings,
    })
}

/// Detections of one (prompt, seed) item: the baseline and one entry per
/// candidate step.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepItem {
    pub prompt_id: String,
    pub seed: u64,
    pub baseline: Vec<Detection>,
    pub candidates: Vec<Vec<Detection>>,
    pub seconds: f64,
}

/// Runs the baseline once, pausing at each candidate step, and resumes a
/// refined run from each pause. Candidates whose nursing acts before the
/// candidate step are run from scratch.
pub fn sweep_item(
    params: &ModelParams<f32>,
    table: &ScheduleTable,
    base: &SamplerConfig,
    candidates: &[SamplerConfig],
    prompt: &PromptSpec,
    seed: u64,
) -> SweepItem {
    let t0 = Instant::now();
    let starts: Vec<Option<usize>> = candidates.iter().map(first_hook).collect();
    let pause: Vec<usize> = starts.iter().flatten().copied().collect();
    let (baseline, states) = match generate_from(params, prompt, table, base, seed, None, &pause) {
        Ok((rec, states)) => (detections_of(&rec), states),
        Err(_) => (Vec::new(), Vec::new()),
    };
    let resume =
        |s: usize| -> Option<SamplerState<f32>> { states.iter().find(|st| st.step == s).cloned() };
    let candidates = candidates
        .iter()
        .zip(&starts)
        .map(|(cfg, start)| {
            let from = match *start {
                Some(s) => resume(s),
                None => None,
            };
            match generate_from(params, prompt, table, cfg, seed, from, &[]) {
                Ok((rec, _)) => detections_of(&rec),
                Err(_) => Vec::new(),
            }
        })
        .collect();
    SweepItem {
        prompt_id: prompt.id.clone(),
        seed,
        baseline,
        candidates,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// The step a resumed run may start from: the IterRef step, provided no
/// guidance step comes earlier.
fn first_hook(cfg: &SamplerConfig) -> Option<usize> {
    let s = cfg.nursing.iterref_step?;
    if cfg.nursing.gsng_enabled && cfg.nursing.gsng_range.0 < s {
        None
    } else {
        Some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub result: SweepResult,
    /// No-nursing TIAM per dataset.
    pub baseline: Vec<f64>,
    pub items: Vec<SweepItem>,
}

impl SweepOutcome {
    pub fn selected_index(&self) -> usize {
        self.result
            .steps
            .iter()
            .position(|&s| s == self.result.selected)
            .expect("selected step is a candidate")
    }
}

pub fn candidate_configs(cfg: &RunConfig) -> Vec<SamplerConfig> {
    cfg.candidate_steps()
        .into_iter()
        .map(|s| {
            let mut n = if cfg.sweep.with_guidance {
                cfg.nursing.clone()
            } else {
                NursingConfig {
                    gsng_enabled: false,
                    ..cfg.nursing.clone()
                }
            };
            n.iterref_step = Some(s);
            sampler_config(cfg, n)
        })
        .collect()
}

/// Validation sweep over the candidate steps for each `(name, manifest)`.
pub fn sweep(
    params: &ModelParams<f32>,
    cfg: &RunConfig,
    datasets: &[(String, DatasetManifest)],
    workers: usize,
) -> Result<SweepOutcome> {
    let table = cfg.schedule.build()?;
    let base = sampler_config(cfg, NursingConfig::disabled());
    let cands = candidate_configs(cfg);
    base.validate(&table)?;
    for c in &cands {
        c.validate(&table)?;
    }
    let steps = cfg.candidate_steps();
    let training_steps = steps
        .iter()
        .map(|&s| table.map_sampling_step(s).map(|r| r.training_step))
        .collect::<Result<Vec<_>>>()?;

    let work: Vec<(PromptSpec, u64)> = datasets.iter().flat_map(|(_, m)| items(m)).collect();
    let pool = thread_pool(workers)?;
    let done: Vec<SweepItem> = pool.install(|| {
        work.par_iter()
            .map(|(p, s)| sweep_item(params, &table, &base, &cands, p, *s))
            .collect()
    });
    score_sweep(cfg, datasets, steps, training_steps, done)
}

/// Scores finished sweep items; the outcome does not depend on their order.
pub fn score_sweep(
    cfg: &RunConfig,
    datasets: &[(String, DatasetManifest)],
    steps: Vec<usize>,
    training_steps: Vec<usize>,
    items: Vec<SweepItem>,
) -> Result<SweepOutcome> {
    let key = |it: &SweepItem| (it.prompt_id.clone(), it.seed);
    let base_table: DetectionTable = items
        .iter()
        .map(|it| (key(it), it.baseline.clone()))
        .collect();
    let mut raw = Vec::with_capacity(datasets.len());
    let mut baseline = Vec::with_capacity(datasets.len());
    for (_, manifest) in datasets {
        baseline.push(tiam(manifest, &base_table)?.tiam);
        let row = (0..steps.len())
            .map(|i| {
                let t: DetectionTable = items
                    .iter()
                    .map(|it| (key(it), it.candidates[i].clone()))
                    .collect();
                tiam(manifest, &t).map(|r| r.tiam)
            })
            .collect::<Result<Vec<_>>>()?;
        raw.push(row);
    }
    let names = datasets.iter().map(|(n, _)| n.clone()).collect();
    let result = SweepResult::new(names, steps, training_steps, raw, cfg.sweep.exclude.clone())?;
    let mut items = items;
    items.sort_by(|a, b| (&a.prompt_id, a.seed).cmp(&(&b.prompt_id, b.seed)));
    Ok(SweepOutcome {
        result,
        baseline,
        items,
    })
}
