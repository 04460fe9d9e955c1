//! Detector oracle for rendered/generated grids, TIAM, position occurrence,
//! min-max standardization and accumulated-score step selection.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenes::{Color, DatasetManifest, PromptKind, PromptSpec, Shape, BACKGROUND, GRAY};
use crate::tensor::{Latent, Real};

/// Foreground cut on the max-channel deviation from the background level.
pub const FOREGROUND_CUT: f64 = 0.3;
pub const MIN_AREA: usize = 4;
pub const DETECTION_THRESHOLD: f64 = 0.25;
/// Ratio at which a bounding box counts as wide or tall.
const ASPECT_SPLIT: f64 = 1.5;
const TEMPLATE_HALVES: std::ops::RangeInclusive<usize> = 1..=7;

/// Inclusive `(r0, c0, r1, c1)`.
pub type Bounds = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub shape: Shape,
    /// `None` for gray.
    pub color: Option<Color>,
    pub score: f64,
    pub bbox: Bounds,
}

impl Detection {
    pub fn label(&self) -> String {
        match self.color {
            Some(c) => format!("{c}-{}", self.shape),
            None => self.shape.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Aspect {
    Square,
    Wide,
    Tall,
}

fn aspect(rows: usize, cols: usize) -> Aspect {
    let (r, c) = (rows as f64, cols as f64);
    if c >= ASPECT_SPLIT * r {
        Aspect::Wide
    } else if r >= ASPECT_SPLIT * c {
        Aspect::Tall
    } else {
        Aspect::Square
    }
}

/// A shape mask cropped to its drawn pixels.
#[derive(Debug, Clone)]
struct Template {
    rows: usize,
    cols: usize,
    mask: Vec<bool>,
}

fn cropped(shape: Shape, half: usize) -> Template {
    let n = 2 * half + 1;
    let full = shape.mask(half);
    let on = |r: usize, c: usize| full[r * n + c];
    let rows: Vec<usize> = (0..n).filter(|&r| (0..n).any(|c| on(r, c))).collect();
    let cols: Vec<usize> = (0..n).filter(|&c| (0..n).any(|r| on(r, c))).collect();
    let (r0, r1) = (rows[0], *rows.last().expect("nonempty mask"));
    let (c0, c1) = (cols[0], *cols.last().expect("nonempty mask"));
    let mut mask = Vec::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            mask.push(on(r, c));
        }
    }
    Template {
        rows: r1 - r0 + 1,
        cols: c1 - c0 + 1,
        mask,
    }
}

/// Template for `shape` fitted to a `rows × cols` box: the canonical size
/// with the closest cropped extent, resized by nearest neighbour.
fn fitted(shape: Shape, rows: usize, cols: usize) -> Vec<bool> {
    let best = TEMPLATE_HALVES
        .map(|h| cropped(shape, h))
        .min_by_key(|t| t.rows.abs_diff(rows) + t.cols.abs_diff(cols))
        .expect("template sizes");
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let sr = (r * best.rows + best.rows / 2) / rows;
        for c in 0..cols {
            let sc = (c * best.cols + best.cols / 2) / cols;
            out.push(best.mask[sr.min(best.rows - 1) * best.cols + sc.min(best.cols - 1)]);
        }
    }
    out
}

fn cosine(a: &[bool], b: &[bool]) -> f64 {
    let both = a.iter().zip(b).filter(|(&x, &y)| x && y).count() as f64;
    let na = a.iter().filter(|&&x| x).count() as f64;
    let nb = b.iter().filter(|&&x| x).count() as f64;
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        both / (na * nb).sqrt()
    }
}

fn nearest_color(rgb: [f64; 3]) -> Option<Color> {
    let dist = |p: [f64; 3]| (0..3).map(|i| (p[i] - rgb[i]).powi(2)).sum::<f64>();
    let mut best: (Option<Color>, f64) = (None, dist(GRAY));
    for c in Color::ALL {
        let d = dist(c.rgb());
        if d < best.1 {
            best = (Some(c), d);
        }
    }
    best.0
}

/// 4-connected components of `mask` (`h × w`), in raster order of their
/// first pixel.
fn components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut label = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && !label[j] {
                    label[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        out.push(comp);
    }
    out
}

fn bounds(pixels: &[usize], w: usize) -> Bounds {
    let mut b = (usize::MAX, usize::MAX, 0, 0);
    for &i in pixels {
        let (r, c) = (i / w, i % w);
        b = (b.0.min(r), b.1.min(c), b.2.max(r), b.3.max(c));
    }
    b
}

fn inside(inner: Bounds, outer: Bounds) -> bool {
    inner.0 >= outer.0 && inner.1 >= outer.1 && inner.2 <= outer.2 && inner.3 <= outer.3
}

/// Foreground components of area ≥ 4, each classified by mean color and
/// by template correlation over its bounding box. Small components lying
/// inside a larger component's box are folded into it.
pub fn detect<T: Real>(image: &Latent<T>) -> Vec<Detection> {
    let shape = image.shape();
    let (h, w, ch) = (shape.h, shape.w, shape.c);
    let data = image.data();
    let fg: Vec<bool> = (0..h * w)
        .map(|i| {
            (0..ch)
                .map(|k| (data[i * ch + k].f64() - BACKGROUND).abs())
                .fold(0.0, f64::max)
                > FOREGROUND_CUT
        })
        .collect();
    let mut comps: Vec<(Vec<usize>, Bounds)> = components(&fg, h, w)
        .into_iter()
        .map(|c| {
            let b = bounds(&c, w);
            (c, b)
        })
        .collect();
    comps.sort_by_key(|(c, _)| std::cmp::Reverse(c.len()));
    let mut kept: Vec<Bounds> = Vec::new();
    for (c, b) in &comps {
        if c.len() < MIN_AREA || kept.iter().any(|&k| inside(*b, k)) {
            continue;
        }
        kept.push(*b);
    }
    kept.sort();

    let mut out = Vec::new();
    for b in kept {
        let rows = b.2 - b.0 + 1;
        let cols = b.3 - b.1 + 1;
        let mut mask = Vec::with_capacity(rows * cols);
        let mut rgb = [0.0f64; 3];
        let mut n = 0.0;
        for r in b.0..=b.2 {
            for c in b.1..=b.3 {
                let i = r * w + c;
                mask.push(fg[i]);
                if fg[i] {
                    for (k, acc) in rgb.iter_mut().enumerate().take(ch) {
                        *acc += data[i * ch + k].f64();
                    }
                    n += 1.0;
                }
            }
        }
        rgb.iter_mut().for_each(|v| *v /= n);
        let class = aspect(rows, cols);
        let mut best: Option<(Shape, f64)> = None;
        for s in Shape::ALL {
            let t = cropped(s, 3);
            if aspect(t.rows, t.cols) != class {
                continue;
            }
            let score = cosine(&mask, &fitted(s, rows, cols));
            if best.is_none_or(|(_, bs)| score > bs) {
                best = Some((s, score));
            }
        }
        if let Some((s, score)) = best {
            if score >= DETECTION_THRESHOLD {
                out.push(Detection {
                    shape: s,
                    color: nearest_color(rgb),
                    score,
                    bbox: b,
                });
            }
        }
    }
    out
}

/// Per-entity presence (shape only) and overall success of one generation.
pub fn judge(prompt: &PromptSpec, detections: &[Detection]) -> (bool, Vec<bool>) {
    let present: Vec<bool> = prompt
        .entities
        .iter()
        .map(|e| detections.iter().any(|d| d.shape == e.shape))
        .collect();
    let colors_ok = !prompt.kind.colored()
        || prompt.entities.iter().all(|e| {
            detections
                .iter()
                .filter(|d| d.shape == e.shape)
                .all(|d| d.color == e.color)
        });
    (present.iter().all(|&p| p) && colors_ok, present)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluated {
    pub prompt_id: String,
    pub kind: PromptKind,
    pub seed: u64,
    pub success: bool,
    pub present: Vec<bool>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub items: Vec<Evaluated>,
    pub tiam: f64,
}

/// Detections keyed by `(prompt id, seed)`.
pub type DetectionTable = BTreeMap<(String, u64), Vec<Detection>>;

pub fn tiam(manifest: &DatasetManifest, detections: &DetectionTable) -> Result<EvalResult> {
    let mut items = Vec::with_capacity(manifest.prompts.len() * manifest.seeds.len());
    for prompt in &manifest.prompts {
        for &seed in &manifest.seeds {
            let found =
                detections
                    .get(&(prompt.id.clone(), seed))
                    .ok_or_else(|| Error::Completeness {
                        prompt_id: prompt.id.clone(),
                        seed,
                    })?;
            let (success, present) = judge(prompt, found);
            items.push(Evaluated {
                prompt_id: prompt.id.clone(),
                kind: prompt.kind,
                seed,
                success,
                present,
                detections: found.clone(),
            });
        }
    }
    let hits = items.iter().filter(|e| e.success).count();
    let tiam = if items.is_empty() {
        0.0
    } else {
        hits as f64 / items.len() as f64
    };
    Ok(EvalResult { items, tiam })
}

/// Fraction of generations in which the k-th prompted entity was detected.
pub fn position_occurrence(result: &EvalResult) -> Result<Vec<f64>> {
    let Some(first) = result.items.first() else {
        return Ok(Vec::new());
    };
    if result.items.iter().any(|e| e.kind != first.kind) {
        return Err(Error::Contract(
            "position occurrence needs prompts of a single kind".into(),
        ));
    }
    let k = first.kind.entity_count();
    let n = result.items.len() as f64;
    Ok((0..k)
        .map(|pos| result.items.iter().filter(|e| e.present[pos]).count() as f64 / n)
        .collect())
}

/// `(x − min)/(max − min)`; a constant list maps to zeros.
pub fn standardize_minmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Contract("cannot standardize an empty list".into()));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|&x| (x - min) / (max - min)).collect())
}

/// Standardized scores of one dataset over candidate steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetScores {
    pub steps: Vec<usize>,
    pub standardized: Vec<f64>,
}

/// Sum over datasets per step and the step with the largest sum (earliest
/// on ties).
pub fn accumulate_select(datasets: &[DatasetScores]) -> Result<(Vec<f64>, usize)> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Contract("no datasets to accumulate".into()))?;
    if first.steps.is_empty() {
        return Err(Error::Contract("no candidate steps".into()));
    }
    let mut acc = vec![0.0; first.steps.len()];
    for d in datasets {
        if d.steps != first.steps || d.standardized.len() != d.steps.len() {
            return Err(Error::Contract(
                "datasets were scored on different step lists".into(),
            ));
        }
        acc.iter_mut()
            .zip(&d.standardized)
            .for_each(|(a, &v)| *a += v);
    }
    let mut best = 0;
    for (i, &v) in acc.iter().enumerate() {
        if v > acc[best] {
            best = i;
        }
    }
    Ok((acc, first.steps[best]))
}

/// Raw and derived sweep scores, indexed `[dataset][step]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub datasets: Vec<String>,
    pub steps: Vec<usize>,
    pub training_steps: Vec<usize>,
    pub raw: Vec<Vec<f64>>,
    pub standardized: Vec<Vec<f64>>,
    pub accumulated: Vec<f64>,
    pub selected: usize,
    /// Datasets left out of the accumulation.
    pub excluded: Vec<String>,
}

impl SweepResult {
    pub fn new(
        datasets: Vec<String>,
        steps: Vec<usize>,
        training_steps: Vec<usize>,
        raw: Vec<Vec<f64>>,
        excluded: Vec<String>,
    ) -> Result<Self> {
        if raw.len() != datasets.len() || training_steps.len() != steps.len() {
            return Err(Error::Contract("sweep table dimensions disagree".into()));
        }
        let standardized = raw
            .iter()
            .map(|r| standardize_minmax(r))
            .collect::<Result<Vec<_>>>()?;
        let scored: Vec<DatasetScores> = datasets
            .iter()
            .zip(&standardized)
            .filter(|(name, _)| !excluded.contains(name))
            .map(|(_, s)| DatasetScores {
                steps: steps.clone(),
                standardized: s.clone(),
            })
            .collect();
        let (accumulated, selected) = accumulate_select(&scored)?;
        Ok(Self {
            datasets,
            steps,
            training_steps,
            raw,
            standardized,
            accumulated,
            selected,
            excluded,
        })
    }

    /// One row per (dataset, step), datasets in name order.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(
            out,
            "dataset,sampling_step,training_step,tiam,tiam_std,accumulated,selected"
        )?;
        let mut order: Vec<usize> = (0..self.datasets.len()).collect();
        order.sort_by(|&a, &b| self.datasets[a].cmp(&self.datasets[b]));
        for d in order {
            for (i, &s) in self.steps.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6},{}",
                    self.datasets[d],
                    s,
                    self.training_steps[i],
                    self.raw[d][i],
                    self.standardized[d][i],
                    self.accumulated[i],
                    s == self.selected
                )?;
            }
        }
        Ok(())
    }
}

pub fn write_eval_csv(result: &EvalResult, mut out: impl Write) -> Result<()> {
    writeln!(out, "prompt_id,seed,success,detected_labels")?;
    let mut items: Vec<&Evaluated> = result.items.iter().collect();
    items.sort_by(|a, b| (&a.prompt_id, a.seed).cmp(&(&b.prompt_id, b.seed)));
    for e in items {
        let labels: Vec<String> = e.detections.iter().map(Detection::label).collect();
        writeln!(
            out,
            "{},{},{},{}",
            e.prompt_id,
            e.seed,
            e.success,
            labels.join(";")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::scenes::{
        enumerate_prompts, render_scene, sample_dataset, sample_scene, ColorPalette, Entity,
        EntityVocab, SceneEntity, SceneSpec, Split,
    };

    fn entity(shape: Shape, color: Option<Color>) -> Entity {
        Entity { shape, color }
    }

    fn found(shape: Shape, color: Option<Color>) -> Detection {
        Detection {
            shape,
            color,
            score: 1.0,
            bbox: (0, 0, 1, 1),
        }
    }

    #[test]
    fn rendered_pair_is_recovered() {
        let scene = SceneSpec {
            entities: vec![
                SceneEntity {
                    shape: Shape::Disk,
                    color: Some(Color::Red),
                    center: (4, 4),
                    half_size: 3,
                },
                SceneEntity {
                    shape: Shape::Square,
                    color: Some(Color::Blue),
                    center: (11, 11),
                    half_size: 2,
                },
            ],
            background: BACKGROUND,
        };
        let dets = detect(&render_scene(&scene));
        let labels: Vec<String> = dets.iter().map(Detection::label).collect();
        assert_eq!(labels, ["red-disk", "blue-square"]);
        assert!(detect(&Latent::filled(
            crate::scenes::SCENE_SHAPE,
            BACKGROUND as f32
        ))
        .is_empty());
    }

    #[test]
    fn render_then_detect_recovers_every_entity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let vocab = EntityVocab::default();
        let palette = ColorPalette::default();
        for kind in [PromptKind::Two, PromptKind::ThreeColor] {
            let pool = enumerate_prompts(kind, &vocab, &palette);
            for i in 0..100 {
                let p = &pool[(i * 37) % pool.len()];
                let scene = sample_scene(p, &mut rng).unwrap();
                let dets = detect(&render_scene(&scene));
                let mut want: Vec<(Shape, Option<Color>)> =
                    scene.entities.iter().map(|e| (e.shape, e.color)).collect();
                let mut got: Vec<(Shape, Option<Color>)> =
                    dets.iter().map(|d| (d.shape, d.color)).collect();
                want.sort();
                got.sort();
                assert_eq!(got, want, "{}", p.id);
                assert!(judge(p, &dets).0);
            }
        }
    }

    fn manifest(p: PromptSpec, seeds: usize) -> DatasetManifest {
        sample_dataset(&[p], 1, seeds, 0, Split::Validation).unwrap()
    }

    #[test]
    fn tiam_counts_successes() {
        let p = PromptSpec::new(
            PromptKind::Two,
            vec![entity(Shape::Cross, None), entity(Shape::Ring, None)],
        )
        .unwrap();
        let m = manifest(p.clone(), 8);
        let table: DetectionTable = m
            .seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let d = if i < 3 {
                    vec![found(Shape::Ring, None), found(Shape::Cross, None)]
                } else {
                    vec![found(Shape::Cross, None)]
                };
                ((p.id.clone(), s), d)
            })
            .collect();
        let r = tiam(&m, &table).unwrap();
        assert_eq!(r.tiam, 0.375);
        let recount = r
            .items
            .iter()
            .filter(|e| judge(&p, &table[&(e.prompt_id.clone(), e.seed)]).0)
            .count();
        assert_eq!(recount, 3);
        assert_eq!(position_occurrence(&r).unwrap(), vec![1.0, 0.375]);

        let all: DetectionTable = m
            .seeds
            .iter()
            .map(|&s| {
                (
                    (p.id.clone(), s),
                    vec![found(Shape::Cross, None), found(Shape::Ring, None)],
                )
            })
            .collect();
        assert_eq!(tiam(&m, &all).unwrap().tiam, 1.0);

        let mut missing = all.clone();
        missing.pop_first();
        assert!(matches!(
            tiam(&m, &missing),
            Err(Error::Completeness { .. })
        ));
    }

    #[test]
    fn wrong_color_fails_a_colored_prompt() {
        let p = PromptSpec::new(
            PromptKind::TwoColor,
            vec![
                entity(Shape::Disk, Some(Color::Red)),
                entity(Shape::Vbar, Some(Color::Green)),
            ],
        )
        .unwrap();
        let right = [
            found(Shape::Disk, Some(Color::Red)),
            found(Shape::Vbar, Some(Color::Green)),
        ];
        let wrong = [
            found(Shape::Disk, Some(Color::Blue)),
            found(Shape::Vbar, Some(Color::Green)),
        ];
        assert!(judge(&p, &right).0);
        let (ok, present) = judge(&p, &wrong);
        assert!(!ok);
        assert_eq!(present, vec![true, true]);
    }

    #[test]
    fn position_occurrence_follows_relabeling() {
        let p = PromptSpec::new(
            PromptKind::Two,
            vec![entity(Shape::Hbar, None), entity(Shape::Checker, None)],
        )
        .unwrap();
        let q = PromptSpec::new(
            PromptKind::Two,
            vec![entity(Shape::Checker, None), entity(Shape::Hbar, None)],
        )
        .unwrap();
        let m = manifest(p.clone(), 4);
        let mq = manifest(q.clone(), 4);
        let dets = |id: &str, seeds: &[u64]| -> DetectionTable {
            seeds
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let d = if i % 2 == 0 {
                        vec![found(Shape::Hbar, None)]
                    } else {
                        vec![found(Shape::Hbar, None), found(Shape::Checker, None)]
                    };
                    ((id.to_string(), s), d)
                })
                .collect()
        };
        let a = position_occurrence(&tiam(&m, &dets(&p.id, &m.seeds)).unwrap()).unwrap();
        let b = position_occurrence(&tiam(&mq, &dets(&q.id, &mq.seeds)).unwrap()).unwrap();
        assert_eq!(a, vec![1.0, 0.5]);
        assert_eq!(b, vec![a[1], a[0]]);
    }

    #[test]
    fn standardization_of_appendix_values() {
        let s = standardize_minmax(&[44.38, 53.12, 61.25]).unwrap();
        let oracle = (53.12 - 44.38) / (61.25 - 44.38);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[2], 1.0);
        assert!((s[1] - oracle).abs() < 1e-12);
        assert!((s[1] - 0.5181).abs() < 1e-4);
        assert_eq!(standardize_minmax(&[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert!(standardize_minmax(&[]).is_err());
    }

    #[test]
    fn standardization_ignores_positive_affine_maps() {
        let x = [0.1, 0.7, 0.25, 0.4];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
        for (a, b) in standardize_minmax(&x)
            .unwrap()
            .iter()
            .zip(standardize_minmax(&y).unwrap())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_select_the_earliest_step() {
        let d = |v: Vec<f64>| DatasetScores {
            steps: vec![0, 2, 4],
            standardized: v,
        };
        let (acc, sel) =
            accumulate_select(&[d(vec![0.0, 1.0, 0.5]), d(vec![1.0, 0.0, 0.5])]).unwrap();
        assert_eq!(acc, vec![1.0, 1.0, 1.0]);
        assert_eq!(sel, 0);
    }

    #[test]
    fn selection_survives_per_dataset_rescaling() {
        let raw = vec![vec![0.2, 0.5, 0.45, 0.1], vec![0.3, 0.25, 0.4, 0.2]];
        let names = vec!["a".to_string(), "b".to_string()];
        let base = SweepResult::new(
            names.clone(),
            vec![0, 2, 4, 6],
            vec![981, 941, 901, 861],
            raw.clone(),
            vec![],
        )
        .unwrap();
        let scaled: Vec<Vec<f64>> = raw
            .iter()
            .zip([10.0, 0.5])
            .map(|(r, a)| r.iter().map(|v| a * v + 1.0).collect())
            .collect();
        let other = SweepResult::new(
            names.clone(),
            vec![0, 2, 4, 6],
            vec![981, 941, 901, 861],
            scaled,
            vec![],
        )
        .unwrap();
        assert_eq!(base.selected, other.selected);
        let only_b = SweepResult::new(
            names,
            vec![0, 2, 4, 6],
            vec![981, 941, 901, 861],
            raw,
            vec!["a".into()],
        )
        .unwrap();
        assert_eq!(only_b.selected, 4);
    }
}
