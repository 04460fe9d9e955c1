//! Command-line front end: `gen-data`, `train`, `sweep`, `generate`, `eval`
//! and `report`. Each writes into its own directory under the output root,
//! together with the resolved configuration and the checkpoint hash.

pub mod config;
pub mod experiment;
pub mod plot;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{position_occurrence, write_eval_csv, SweepResult};
use crate::model::{checkpoint, ModelParams};
use crate::nursing::NursingConfig;
use crate::sampler::{generate, write_records};
use crate::scenes::{hash_hex, DatasetManifest, PromptSpec};

use config::RunConfig;
use experiment::{
    build_datasets, evaluate, prompt_pool, run_batch, sampler_config, sweep, write_timings,
};
use plot::{latent_strip, line_plot, Reference, Series};

pub const OUT_ENV: &str = "GSNLAB_OUT";

#[derive(Debug, Parser)]
#[command(
    name = "gsnlab",
    version,
    about = "Latent nursing laboratory for toy diffusion models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; the GSNLAB_OUT environment variable takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Global sampler seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    None,
    Ours,
    OursPlus,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the train, validation and test manifests.
    GenData(Common),
    /// Train the denoiser and save a checkpoint.
    Train(Common),
    /// Score every candidate IterRef step on the validation sets.
    Sweep(Common),
    /// Generate records for chosen prompts, or for a whole split.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Prompt ids; defaults to every prompt of the split.
        #[arg(long)]
        prompt: Vec<String>,
        /// Per-generation seeds; defaults to the split's seeds.
        #[arg(long = "item-seed")]
        item_seed: Vec<u64>,
        #[arg(long, value_enum, default_value = "validation")]
        split: SplitArg,
    },
    /// Score the test sets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Replace the configured nursing settings with a preset.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Use the step selected by a previous sweep.
        #[arg(long)]
        from_sweep: bool,
        /// Name of the output directory under `eval/`.
        #[arg(long)]
        name: Option<String>,
    },
    /// Plots and a summary of the sweep and evaluations.
    Report(Common),
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = &common.out {
        cfg.run.out = out.clone();
    }
    if let Some(out) = std::env::var_os(OUT_ENV) {
        cfg.run.out = PathBuf::from(out);
    }
    if let Some(w) = common.workers {
        cfg.run.workers = w;
    }
    if let Some(s) = common.seed {
        cfg.sampler.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct Provenance {
    command: String,
    version: String,
    config_sha256: String,
    checkpoint: Option<PathBuf>,
    checkpoint_sha256: Option<String>,
}

/// Creates `out/<sub>` and records the resolved configuration and the
/// checkpoint it used.
fn output_dir(cfg: &RunConfig, sub: &str, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let dir = cfg.run.out.join(sub);
    fs::create_dir_all(&dir)?;
    let text = cfg.to_toml();
    fs::write(dir.join("resolved_config.toml"), &text)?;
    let checkpoint_sha256 = match checkpoint {
        Some(p) => Some(hash_hex(&fs::read(p)?)),
        None => None,
    };
    let prov = Provenance {
        command: sub.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: hash_hex(text.as_bytes()),
        checkpoint: checkpoint.map(Path::to_path_buf),
        checkpoint_sha256,
    };
    write_json(&dir.join("provenance.json"), &prov)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_params(cfg: &RunConfig) -> Result<(ModelParams<f32>, PathBuf)> {
    let path = cfg.checkpoint_path();
    let params = checkpoint::load::<f32>(&path)
        .map_err(|e| Error::Config(format!("cannot load checkpoint {}: {e}", path.display())))?;
    if params.config != cfg.model_config() {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok((params, path))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(c) => gen_data(&resolve(&c)?),
        Command::Train(c) => train(&resolve(&c)?),
        Command::Sweep(c) => run_sweep(&resolve(&c)?),
        Command::Generate {
            common,
            prompt,
            item_seed,
            split,
        } => run_generate(&resolve(&common)?, &prompt, &item_seed, split),
        Command::Eval {
            common,
            preset,
            from_sweep,
            name,
        } => run_eval(&resolve(&common)?, preset, from_sweep, name),
        Command::Report(c) => report(&resolve(&c)?),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = output_dir(cfg, "data", None)?;
    let ds = build_datasets(cfg)?;
    ds.train.save(&dir.join("train.jsonl"))?;
    for k in &ds.kinds {
        k.validation
            .save(&dir.join(format!("{}_validation.jsonl", k.kind.name())))?;
        k.test
            .save(&dir.join(format!("{}_test.jsonl", k.kind.name())))?;
    }
    println!("manifests written to {}", dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let ds = build_datasets(cfg)?;
    let dir = output_dir(cfg, "train", None)?;
    let mut log = create(&dir.join("train_log.csv"))?;
    writeln!(log, "epoch,loss")?;
    let (params, report) = experiment::train_model(cfg, &ds.train, |e, l| {
        eprintln!("epoch {e}: loss {l:.5}");
    })?;
    for (e, l) in report.epoch_losses.iter().enumerate() {
        writeln!(log, "{e},{l:.6}")?;
    }
    log.flush()?;
    let path = cfg.checkpoint_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(&params, &path)?;
    output_dir(cfg, "train", Some(&path))?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

/// Sweep scores plus the three reference numbers per dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub result: SweepResult,
    pub baseline: Vec<f64>,
    /// TIAM of refinement at step 0, when 0 was a candidate.
    pub step0: Vec<Option<f64>>,
    pub at_selected: Vec<f64>,
}

impl SweepSummary {
    pub fn new(outcome: &experiment::SweepOutcome) -> Self {
        let r = &outcome.result;
        let sel = outcome.selected_index();
        let zero = r.steps.iter().position(|&s| s == 0);
        Self {
            result: r.clone(),
            baseline: outcome.baseline.clone(),
            step0: r.raw.iter().map(|row| zero.map(|i| row[i])).collect(),
            at_selected: r.raw.iter().map(|row| row[sel]).collect(),
        }
    }
}

fn validation_sets(cfg: &RunConfig) -> Result<Vec<(String, DatasetManifest)>> {
    Ok(build_datasets(cfg)?
        .kinds
        .into_iter()
        .map(|k| (k.kind.name().to_string(), k.validation))
        .collect())
}

fn run_sweep(cfg: &RunConfig) -> Result<()> {
    let (params, ck) = load_params(cfg)?;
    let dir = output_dir(cfg, "sweep", Some(&ck))?;
    let sets = validation_sets(cfg)?;
    let outcome = sweep(&params, cfg, &sets, cfg.run.workers)?;
    let mut csv = create(&dir.join("sweep.csv"))?;
    outcome.result.write_csv(&mut csv)?;
    csv.flush()?;
    let summary = SweepSummary::new(&outcome);
    write_json(&dir.join("sweep.json"), &summary)?;
    fs::write(dir.join("sweep.svg"), sweep_plot(&summary))?;
    let timings: Vec<experiment::Timing> = outcome
        .items
        .iter()
        .map(|it| experiment::Timing {
            prompt_id: it.prompt_id.clone(),
            seed: it.seed,
            seconds: it.seconds,
        })
        .collect();
    write_timings(&timings, create(&dir.join("timings.csv"))?)?;
    for (i, name) in summary.result.datasets.iter().enumerate() {
        println!(
            "{name}: baseline {:.4}, selected step {} -> {:.4}",
            summary.baseline[i], summary.result.selected, summary.at_selected[i]
        );
    }
    Ok(())
}

fn sweep_plot(summary: &SweepSummary) -> String {
    let r = &summary.result;
    let xs: Vec<f64> = r.steps.iter().map(|&s| s as f64).collect();
    let series: Vec<Series> = std::iter::once(Series {
        name: "accumulated".into(),
        points: xs
            .iter()
            .copied()
            .zip(r.accumulated.iter().copied())
            .collect(),
    })
    .chain(
        r.datasets
            .iter()
            .zip(&r.standardized)
            .map(|(name, std)| Series {
                name: format!("{name} (standardized)"),
                points: xs.iter().copied().zip(std.iter().copied()).collect(),
            }),
    )
    .collect();
    line_plot(
        "Accumulated standardized TIAM",
        "sampling step of refinement",
        "score",
        &series,
        &[],
    )
}

fn tiam_plot(summary: &SweepSummary) -> String {
    let r = &summary.result;
    let series: Vec<Series> = r
        .datasets
        .iter()
        .zip(&r.raw)
        .map(|(name, row)| Series {
            name: name.clone(),
            points: r
                .steps
                .iter()
                .map(|&s| s as f64)
                .zip(row.iter().copied())
                .collect(),
        })
        .collect();
    let refs: Vec<Reference> = r
        .datasets
        .iter()
        .zip(&summary.baseline)
        .map(|(name, &y)| Reference {
            name: format!("{name} no nursing"),
            y,
        })
        .collect();
    line_plot(
        "TIAM vs refinement step",
        "sampling step of refinement",
        "TIAM",
        &series,
        &refs,
    )
}

fn run_generate(
    cfg: &RunConfig,
    prompts: &[String],
    item_seeds: &[u64],
    split: SplitArg,
) -> Result<()> {
    let (params, ck) = load_params(cfg)?;
    let table = cfg.schedule.build()?;
    let ds = build_datasets(cfg)?;
    let manifests: Vec<&DatasetManifest> = ds
        .kinds
        .iter()
        .map(|k| match split {
            SplitArg::Validation => &k.validation,
            SplitArg::Test => &k.test,
        })
        .collect();
    let chosen: Vec<PromptSpec> = if prompts.is_empty() {
        manifests
            .iter()
            .flat_map(|m| m.prompts.iter().cloned())
            .collect()
    } else {
        let pool: Vec<PromptSpec> = cfg
            .data
            .kinds
            .iter()
            .flat_map(|&k| prompt_pool(k))
            .collect();
        prompts
            .iter()
            .map(|id| {
                pool.iter()
                    .find(|p| &p.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("unknown prompt id {id:?}")))
            })
            .collect::<Result<_>>()?
    };
    let seeds: Vec<u64> = if item_seeds.is_empty() {
        manifests
            .first()
            .map(|m| m.seeds.clone())
            .unwrap_or_default()
    } else {
        item_seeds.to_vec()
    };
    let items: Vec<(PromptSpec, u64)> = chosen
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    let scfg = sampler_config(cfg, cfg.nursing.clone());
    let dir = output_dir(cfg, "generate", Some(&ck))?;
    let (records, timings) = run_batch(&params, &table, &scfg, &items, cfg.run.workers)?;
    let mut out = create(&dir.join("records.jsonl"))?;
    write_records(&mut out, &records)?;
    out.flush()?;
    write_timings(&timings, create(&dir.join("timings.csv"))?)?;
    let failed = records.iter().filter(|r| r.failure.is_some()).count();
    println!(
        "{} records written to {} ({failed} failed)",
        records.len(),
        dir.display()
    );
    Ok(())
}

/// Test-set TIAM of one nursing configuration, per dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub nursing: NursingConfig,
    pub datasets: Vec<String>,
    pub tiam: Vec<f64>,
    pub position_occurrence: Vec<Vec<f64>>,
    pub updates_per_generation: usize,
}

fn run_eval(
    cfg: &RunConfig,
    preset: Option<Preset>,
    from_sweep: bool,
    name: Option<String>,
) -> Result<()> {
    let steps = cfg.schedule.sampling_steps;
    let mut nursing = match preset {
        Some(Preset::None) => NursingConfig::disabled(),
        Some(Preset::Ours) => NursingConfig::ours().scaled_to(steps),
        Some(Preset::OursPlus) => NursingConfig::ours_plus().scaled_to(steps),
        None => cfg.nursing.clone(),
    };
    if from_sweep {
        let summary: SweepSummary = read_json(&cfg.run.out.join("sweep").join("sweep.json"))?;
        nursing.iterref_step = Some(summary.result.selected);
    }
    nursing.validate(steps)?;
    let name = name.unwrap_or_else(|| match preset {
        Some(Preset::None) => "none".into(),
        Some(Preset::Ours) => "ours".into(),
        Some(Preset::OursPlus) => "ours_plus".into(),
        None => "config".into(),
    });
    let (params, ck) = load_params(cfg)?;
    let table = cfg.schedule.build()?;
    let mut resolved = cfg.clone();
    resolved.nursing = nursing.clone();
    let dir = output_dir(&resolved, &format!("eval/{name}"), Some(&ck))?;
    let scfg = sampler_config(cfg, nursing.clone());
    let ds = build_datasets(cfg)?;
    let mut summary = EvalSummary {
        name,
        nursing: nursing.clone(),
        datasets: Vec::new(),
        tiam: Vec::new(),
        position_occurrence: Vec::new(),
        updates_per_generation: nursing.update_budget(),
    };
    let mut records = create(&dir.join("records.jsonl"))?;
    let mut timings = Vec::new();
    for k in &ds.kinds {
        let ev = evaluate(&params, &table, &scfg, &k.test, cfg.run.workers)?;
        let mut csv = create(&dir.join(format!("eval_{}.csv", k.kind.name())))?;
        write_eval_csv(&ev.result, &mut csv)?;
        csv.flush()?;
        write_records(&mut records, &ev.records)?;
        timings.extend(ev.timings);
        println!("{}: TIAM {:.4}", k.kind.name(), ev.result.tiam);
        summary.datasets.push(k.kind.name().to_string());
        summary.tiam.push(ev.result.tiam);
        summary
            .position_occurrence
            .push(position_occurrence(&ev.result)?);
    }
    records.flush()?;
    write_timings(&timings, create(&dir.join("timings.csv"))?)?;
    write_json(&dir.join("summary.json"), &summary)
}

fn report(cfg: &RunConfig) -> Result<()> {
    let summary: SweepSummary = read_json(&cfg.run.out.join("sweep").join("sweep.json"))?;
    let (params, ck) = load_params(cfg)?;
    let dir = output_dir(cfg, "report", Some(&ck))?;
    fs::write(dir.join("tiam_vs_step.svg"), tiam_plot(&summary))?;
    fs::write(dir.join("accumulated.svg"), sweep_plot(&summary))?;

    let mut md = String::new();
    md.push_str("# Sweep\n\n");
    md.push_str(&format!(
        "Selected refinement step: {}\n\n",
        summary.result.selected
    ));
    md.push_str("| dataset | no nursing | step 0 | selected step |\n|---|---|---|---|\n");
    for (i, name) in summary.result.datasets.iter().enumerate() {
        let step0 = summary.step0[i].map_or("n/a".to_string(), |v| format!("{v:.4}"));
        md.push_str(&format!(
            "| {name} | {:.4} | {step0} | {:.4} |\n",
            summary.baseline[i], summary.at_selected[i]
        ));
    }
    let eval_root = cfg.run.out.join("eval");
    if eval_root.is_dir() {
        let mut evals: Vec<EvalSummary> = Vec::new();
        for entry in fs::read_dir(&eval_root)? {
            let path = entry?.path().join("summary.json");
            if path.is_file() {
                evals.push(read_json(&path)?);
            }
        }
        evals.sort_by(|a, b| a.name.cmp(&b.name));
        if !evals.is_empty() {
            md.push_str("\n# Test sets\n\n| configuration | dataset | TIAM | updates |\n|---|---|---|---|\n");
            for e in &evals {
                for (d, t) in e.datasets.iter().zip(&e.tiam) {
                    md.push_str(&format!(
                        "| {} | {d} | {t:.4} | {} |\n",
                        e.name, e.updates_per_generation
                    ));
                }
            }
        }
    }
    fs::write(dir.join("report.md"), md)?;

    // x̂₀ strips for the first validation item.
    let sets = validation_sets(cfg)?;
    if let Some((_, m)) = sets.first() {
        if let (Some(prompt), Some(&seed)) = (m.prompts.first(), m.seeds.first()) {
            let table = cfg.schedule.build()?;
            let mut rows = Vec::new();
            let mut variants = vec![("no nursing".to_string(), NursingConfig::disabled())];
            for step in [0, summary.result.selected] {
                let mut n = NursingConfig {
                    gsng_enabled: false,
                    ..cfg.nursing.clone()
                };
                n.iterref_step = Some(step);
                variants.push((format!("refine at {step}"), n));
            }
            variants.dedup_by(|a, b| a.0 == b.0);
            for (label, n) in variants {
                let mut scfg = sampler_config(cfg, n);
                scfg.capture_x0hat = true;
                let rec = generate(&params, prompt, &table, &scfg, seed)?;
                let every = (rec.snapshots.len() / 10).max(1);
                let strip = rec.snapshots.iter().step_by(every).cloned().collect();
                rows.push((label, strip));
            }
            fs::write(dir.join("x0hat_strip.svg"), latent_strip(&rows, 6))?;
        }
    }
    println!("report written to {}", dir.display());
    Ok(())
}
