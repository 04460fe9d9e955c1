//! Attention-alignment losses and the two ways of pushing the latent along
//! their gradient: a single guidance step (GSNg) and a multi-shift Adam
//! refinement at one sampling step (IterRef).

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::attention::{pipeline, pipeline_backward, SubjectMaps};
use crate::error::{Error, Result};
use crate::model::{
    forward, vjp_wrt_latent, AttentionStack, Cotangents, ModelParams, Objective, Prediction,
    TextEmbedding,
};
use crate::optim::{AdamConfig, AdamMoments};
use crate::scenes::PromptSpec;
use crate::tensor::{Latent, Real};

/// Sampling-step count the default step indices refer to.
pub const REFERENCE_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub cn: bool,
    pub iou: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            cn: true,
            iou: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NursingConfig {
    pub iterref_step: Option<usize>,
    pub n_shifts: usize,
    pub iterref_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub gsng_enabled: bool,
    /// Half-open range of sampling indices `[begin, end)`.
    pub gsng_range: (usize, usize),
    pub gsng_alpha: f64,
    pub loss_terms: LossTerms,
}

impl Default for NursingConfig {
    fn default() -> Self {
        Self::ours()
    }
}

impl NursingConfig {
    /// IterRef at sampling step 8, no guidance.
    pub fn ours() -> Self {
        Self {
            iterref_step: Some(8),
            n_shifts: 50,
            iterref_lr: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            gsng_enabled: false,
            gsng_range: (3, 25),
            gsng_alpha: 0.5,
            loss_terms: LossTerms::default(),
        }
    }

    /// IterRef at sampling step 2 followed by guidance over `[3, 25)`.
    pub fn ours_plus() -> Self {
        Self {
            iterref_step: Some(2),
            gsng_enabled: true,
            ..Self::ours()
        }
    }

    pub fn disabled() -> Self {
        Self {
            iterref_step: None,
            gsng_enabled: false,
            ..Self::ours()
        }
    }

    pub fn validate(&self, sampling_steps: usize) -> Result<()> {
        if let Some(s) = self.iterref_step {
            if s >= sampling_steps {
                return Err(Error::Config(format!(
                    "iterref step {s} outside 0..{sampling_steps}"
                )));
            }
        }
        let (b, e) = self.gsng_range;
        if self.gsng_enabled && (b > e || e > sampling_steps) {
            return Err(Error::Config(format!(
                "guidance range [{b}, {e}) outside 0..{sampling_steps}"
            )));
        }
        if !(self.iterref_lr > 0.0) {
            return Err(Error::Config(
                "iterref learning rate must be positive".into(),
            ));
        }
        if !(self.gsng_alpha >= 0.0) {
            return Err(Error::Config(
                "guidance step size must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Rescales the step indices, given for a 50-step sampler, to `steps`
    /// sampling steps (rounding down).
    pub fn scaled_to(&self, steps: usize) -> Self {
        let scale = |i: usize| i * steps / REFERENCE_STEPS;
        Self {
            iterref_step: self.iterref_step.map(scale),
            gsng_range: (scale(self.gsng_range.0), scale(self.gsng_range.1)),
            ..self.clone()
        }
    }

    pub fn gsng_active(&self, s: usize) -> bool {
        self.gsng_enabled && (self.gsng_range.0..self.gsng_range.1).contains(&s)
    }

    /// Latent updates one generation performs under this configuration.
    pub fn update_budget(&self) -> usize {
        let refine = if self.iterref_step.is_some() {
            self.n_shifts
        } else {
            0
        };
        let guide = if self.gsng_enabled {
            self.gsng_range.1.saturating_sub(self.gsng_range.0)
        } else {
            0
        };
        refine + guide
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.iterref_lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Per-term loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cn: f64,
    pub iou: f64,
}

/// Loss before each shift plus the final loss.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftTrace {
    pub total: Vec<f64>,
    pub cn: Vec<f64>,
    pub iou: Vec<f64>,
}

impl ShiftTrace {
    fn push(&mut self, l: LossBreakdown) {
        self.total.push(l.total);
        self.cn.push(l.cn);
        self.iou.push(l.iou);
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

/// First index of the maximum.
fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn loss_cn<T: Real>(maps: &SubjectMaps<T>) -> Result<T> {
    loss_cn_grad(maps).map(|(v, _)| v)
}

/// `max_s (1 − max_p A^s_p)` and its argmax subgradient.
pub fn loss_cn_grad<T: Real>(maps: &SubjectMaps<T>) -> Result<(T, SubjectMaps<T>)> {
    if maps.is_empty() {
        return Err(Error::Contract("L_CN needs at least one subject".into()));
    }
    let peaks: Vec<usize> = maps.maps.iter().map(|m| argmax(m)).collect();
    let neglect: Vec<T> = maps
        .maps
        .iter()
        .zip(&peaks)
        .map(|(m, &p)| T::one() - m[p])
        .collect();
    let s = argmax(&neglect);
    let mut grad = maps.zeros_like();
    grad.maps[s][peaks[s]] = -T::one();
    Ok((neglect[s], grad))
}

pub fn loss_iou<T: Real>(maps: &SubjectMaps<T>) -> T {
    loss_iou_grad(maps).0
}

/// Mean over unordered pairs of `Σmin(a, b) / Σ(a + b)`; a pair whose maps
/// are both identically zero contributes 0. On `a == b` the min is taken
/// from the earlier map.
pub fn loss_iou_grad<T: Real>(maps: &SubjectMaps<T>) -> (T, SubjectMaps<T>) {
    let mut grad = maps.zeros_like();
    let k = maps.len();
    if k < 2 {
        return (T::zero(), grad);
    }
    let pairs = k * (k - 1) / 2;
    let w = T::lit(1.0 / pairs as f64);
    let mut total = T::zero();
    for m in 0..k {
        for n in m + 1..k {
            let (a, b) = (&maps.maps[m], &maps.maps[n]);
            let inter: T = a.iter().zip(b).map(|(&x, &y)| x.min(y)).sum();
            let union: T = a.iter().zip(b).map(|(&x, &y)| x + y).sum();
            if union == T::zero() {
                continue;
            }
            total += w * inter / union;
            let base = -inter / (union * union);
            let hit = T::one() / union;
            for p in 0..a.len() {
                let (da, db) = if a[p] <= b[p] {
                    (hit, T::zero())
                } else {
                    (T::zero(), hit)
                };
                grad.maps[m][p] += w * (da + base);
                grad.maps[n][p] += w * (db + base);
            }
        }
    }
    (total, grad)
}

pub fn total_loss<T: Real>(maps: &SubjectMaps<T>, terms: LossTerms) -> Result<LossBreakdown> {
    total_loss_grad(maps, terms).map(|(l, _)| l)
}

pub fn total_loss_grad<T: Real>(
    maps: &SubjectMaps<T>,
    terms: LossTerms,
) -> Result<(LossBreakdown, SubjectMaps<T>)> {
    let mut grad = maps.zeros_like();
    let mut out = LossBreakdown::default();
    if terms.cn {
        let (v, g) = loss_cn_grad(maps)?;
        out.cn = v.f64();
        add_maps(&mut grad, &g);
    }
    if terms.iou {
        let (v, g) = loss_iou_grad(maps);
        out.iou = v.f64();
        add_maps(&mut grad, &g);
    }
    out.total = out.cn + out.iou;
    Ok((out, grad))
}

fn add_maps<T: Real>(acc: &mut SubjectMaps<T>, g: &SubjectMaps<T>) {
    for (a, b) in acc.maps.iter_mut().zip(&g.maps) {
        a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
    }
}

/// Nursing loss of the conditional pass, pulled back to the attention stack.
pub struct NursingObjective<'a> {
    pub prompt: &'a PromptSpec,
    pub terms: LossTerms,
    last: Cell<LossBreakdown>,
}

impl<'a> NursingObjective<'a> {
    pub fn new(prompt: &'a PromptSpec, terms: LossTerms) -> Self {
        Self {
            prompt,
            terms,
            last: Cell::new(LossBreakdown::default()),
        }
    }

    /// Breakdown from the most recent evaluation.
    pub fn last(&self) -> LossBreakdown {
        self.last.get()
    }
}

impl<T: Real> Objective<T> for NursingObjective<'_> {
    fn evaluate(
        &self,
        _pred: &Prediction<T>,
        attn: &AttentionStack<T>,
    ) -> Result<(T, Cotangents<T>)> {
        let (maps, tape) = pipeline(attn, self.prompt)?;
        let (loss, d_maps) = total_loss_grad(&maps, self.terms)?;
        self.last.set(loss);
        let d_attn = pipeline_backward(&tape, self.prompt, &d_maps)?;
        Ok((
            T::lit(loss.total),
            Cotangents {
                pred: None,
                attention: Some(d_attn),
            },
        ))
    }
}

/// Loss of the conditional pass at `x_t` without a gradient.
pub fn nursing_loss<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
    prompt: &PromptSpec,
    terms: LossTerms,
) -> Result<LossBreakdown> {
    let (_, attn) = forward(params, x_t, t_norm, text)?;
    let (maps, _) = pipeline(&attn, prompt)?;
    total_loss(&maps, terms)
}

/// Loss and `∂L/∂x_t` of the conditional pass.
pub fn nursing_gradient<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
    prompt: &PromptSpec,
    terms: LossTerms,
) -> Result<(LossBreakdown, Latent<T>)> {
    let objective = NursingObjective::new(prompt, terms);
    let (_, grad) = vjp_wrt_latent(params, x_t, t_norm, text, &objective)?;
    Ok((objective.last(), grad))
}

/// Adam moments for a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    moments: AdamMoments<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(like: &Latent<T>) -> Self {
        Self {
            moments: AdamMoments::new(like.data().len()),
        }
    }

    pub fn step(&self) -> u64 {
        self.moments.step
    }

    pub fn m(&self) -> &[T] {
        &self.moments.m
    }

    pub fn v(&self) -> &[T] {
        &self.moments.v
    }
}

pub fn adam_step<T: Real>(
    mut state: AdamState<T>,
    grad: &Latent<T>,
    x: &Latent<T>,
    cfg: &AdamConfig,
) -> Result<(AdamState<T>, Latent<T>)> {
    grad.ensure_same_shape(x)?;
    let mut next = x.clone();
    state.moments.update(next.data_mut(), grad.data(), cfg)?;
    Ok((state, next))
}

/// `n_shifts` Adam updates of `x_t` against the nursing loss.
pub fn iter_refine<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
    prompt: &PromptSpec,
    cfg: &NursingConfig,
) -> Result<(Latent<T>, ShiftTrace)> {
    let adam = cfg.adam();
    let mut x = x_t.clone();
    let mut state = AdamState::new(&x);
    let mut trace = ShiftTrace::default();
    for shift in 0..cfg.n_shifts {
        let at = |e: Error| Error::Shift {
            shift,
            source: Box::new(e),
        };
        let (loss, grad) =
            nursing_gradient(params, &x, t_norm, text, prompt, cfg.loss_terms).map_err(at)?;
        trace.push(loss);
        (state, x) = adam_step(state, &grad, &x, &adam).map_err(at)?;
    }
    let last = nursing_loss(params, &x, t_norm, text, prompt, cfg.loss_terms).map_err(|e| {
        Error::Shift {
            shift: cfg.n_shifts,
            source: Box::new(e),
        }
    })?;
    trace.push(last);
    Ok((x, trace))
}

/// One plain gradient step `x ← x − α·∇L`. Returns the loss before the step.
pub fn gsn_guidance<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
    prompt: &PromptSpec,
    cfg: &NursingConfig,
) -> Result<(Latent<T>, LossBreakdown)> {
    let (loss, grad) = nursing_gradient(params, x_t, t_norm, text, prompt, cfg.loss_terms)?;
    Ok((guidance_update(x_t, &grad, cfg.gsng_alpha)?, loss))
}

pub fn guidance_update<T: Real>(x: &Latent<T>, grad: &Latent<T>, alpha: f64) -> Result<Latent<T>> {
    x.lincomb(T::one(), grad, T::lit(-alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::model::{embed_prompt, ModelConfig};
    use crate::scenes::{Entity, PromptKind, Shape};
    use crate::tensor::GridShape;

    fn maps(data: Vec<Vec<f64>>, h: usize, w: usize) -> SubjectMaps<f64> {
        SubjectMaps {
            height: h,
            width: w,
            maps: data,
        }
    }

    #[test]
    fn neglect_is_the_worst_subject() {
        let m = maps(vec![vec![0.7, 0.1], vec![0.4, 0.3]], 1, 2);
        assert!((loss_cn(&m).unwrap() - 0.6).abs() < 1e-12);
        let (_, g) = loss_cn_grad(&m).unwrap();
        assert_eq!(g.maps, vec![vec![0.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(
            loss_cn(&maps(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1, 2)).unwrap(),
            0.0
        );
        assert_eq!(
            loss_cn(&maps(vec![vec![0.5, 0.2], vec![0.0, 0.0]], 1, 2)).unwrap(),
            1.0
        );
    }

    #[test]
    fn neglect_gradient_goes_to_first_peak() {
        let m = maps(vec![vec![0.3, 0.3], vec![0.3, 0.3]], 1, 2);
        let (_, g) = loss_cn_grad(&m).unwrap();
        assert_eq!(g.maps, vec![vec![-1.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn overlap_examples() {
        let m = maps(vec![vec![0.4, 0.0], vec![0.2, 0.2]], 1, 2);
        assert!((loss_iou(&m) - 0.25).abs() < 1e-12);
        let same = maps(vec![vec![0.3, 0.1], vec![0.3, 0.1]], 1, 2);
        assert!((loss_iou(&same) - 0.5).abs() < 1e-12);
        let disjoint = maps(vec![vec![0.3, 0.0], vec![0.0, 0.1]], 1, 2);
        assert_eq!(loss_iou(&disjoint), 0.0);
        let empty = maps(vec![vec![0.0, 0.0], vec![0.0, 0.0]], 1, 2);
        assert_eq!(loss_iou(&empty), 0.0);
        assert_eq!(loss_iou(&maps(vec![vec![0.5, 0.5]], 1, 2)), 0.0);
    }

    #[test]
    fn total_is_the_sum_of_enabled_terms() {
        let m = maps(vec![vec![0.4, 0.0], vec![0.2, 0.2]], 1, 2);
        let l = total_loss(&m, LossTerms::default()).unwrap();
        assert!((l.total - (loss_cn(&m).unwrap() + 0.25)).abs() < 1e-12);
        assert!((l.total - 1.05).abs() < 1e-12);
        let cn = total_loss(
            &m,
            LossTerms {
                cn: true,
                iou: false,
            },
        )
        .unwrap();
        assert_eq!(cn.total, loss_cn(&m).unwrap());
    }

    fn central_difference(
        m: &SubjectMaps<f64>,
        f: impl Fn(&SubjectMaps<f64>) -> f64,
    ) -> SubjectMaps<f64> {
        let h = 1e-7;
        let mut g = m.zeros_like();
        for s in 0..m.len() {
            for p in 0..m.maps[s].len() {
                let mut up = m.clone();
                up.maps[s][p] += h;
                let mut dn = m.clone();
                dn.maps[s][p] -= h;
                g.maps[s][p] = (f(&up) - f(&dn)) / (2.0 * h);
            }
        }
        g
    }

    proptest! {
        #[test]
        fn losses_stay_in_range(data in proptest::collection::vec(0.0f64..1.0, 3 * 6)) {
            let m = maps(data.chunks(6).map(<[f64]>::to_vec).collect(), 2, 3);
            let cn = loss_cn(&m).unwrap();
            let iou = loss_iou(&m);
            prop_assert!((0.0..=1.0).contains(&cn));
            prop_assert!((0.0..=0.5).contains(&iou));
        }

        #[test]
        fn overlap_gradient_matches_differences(data in proptest::collection::vec(0.05f64..1.0, 2 * 4)) {
            let m = maps(data.chunks(4).map(<[f64]>::to_vec).collect(), 2, 2);
            // Ties make the min non-differentiable; skip them.
            let gap = m.maps[0].iter().zip(&m.maps[1]).map(|(a, b)| (a - b).abs()).fold(1.0, f64::min);
            prop_assume!(gap > 1e-4);
            let (_, g) = loss_iou_grad(&m);
            let num = central_difference(&m, |x| loss_iou(x));
            for (a, b) in g.maps.iter().flatten().zip(num.maps.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let shape = GridShape::new(1, 1, 1);
        let x = Latent::from_vec(shape, vec![0.0f64]).unwrap();
        let g = Latent::from_vec(shape, vec![1.0f64]).unwrap();
        let cfg = NursingConfig::ours().adam();
        let (state, next) = adam_step(AdamState::new(&x), &g, &x, &cfg).unwrap();
        assert_eq!(state.step(), 1);
        assert!((next.data()[0] + 0.01).abs() < 1e-8);

        let neg = Latent::from_vec(shape, vec![-1.0f64]).unwrap();
        let (_, other) = adam_step(AdamState::new(&x), &neg, &x, &cfg).unwrap();
        assert_eq!(other.data()[0], -next.data()[0]);

        let zero = Latent::zeros(shape);
        let (_, same) = adam_step(AdamState::new(&x), &zero, &x, &cfg).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn guidance_update_arithmetic() {
        let shape = GridShape::new(1, 1, 1);
        let x = Latent::from_vec(shape, vec![0.5f64]).unwrap();
        let g = Latent::from_vec(shape, vec![0.2f64]).unwrap();
        assert!((guidance_update(&x, &g, 0.5).unwrap().data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(guidance_update(&x, &g, 0.0).unwrap(), x);
        assert_eq!(guidance_update(&x, &Latent::zeros(shape), 0.5).unwrap(), x);
    }

    #[test]
    fn presets_and_budgets() {
        let ours = NursingConfig::ours();
        assert_eq!(ours.iterref_step, Some(8));
        assert_eq!(ours.update_budget(), 50);
        let plus = NursingConfig::ours_plus();
        assert_eq!(plus.iterref_step, Some(2));
        assert_eq!(plus.gsng_range, (3, 25));
        assert_eq!(plus.update_budget(), 72);
        assert_eq!(NursingConfig::disabled().update_budget(), 0);
        let flow = plus.scaled_to(28);
        assert_eq!(flow.iterref_step, Some(1));
        assert_eq!(flow.gsng_range, (1, 14));
        assert!(NursingConfig {
            iterref_step: Some(50),
            ..ours
        }
        .validate(50)
        .is_err());
    }

    fn small_model() -> (ModelParams<f64>, PromptSpec) {
        let cfg = ModelConfig {
            grid: GridShape::new(4, 4, 3),
            d: 8,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let prompt = PromptSpec::new(
            PromptKind::Two,
            vec![
                Entity {
                    shape: Shape::Disk,
                    color: None,
                },
                Entity {
                    shape: Shape::Square,
                    color: None,
                },
            ],
        )
        .unwrap();
        (params, prompt)
    }

    #[test]
    fn refinement_trace_has_one_entry_per_shift_plus_one() {
        let (params, prompt) = small_model();
        let text = embed_prompt(&params, &prompt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Latent<f64> = crate::model::train::standard_normal(params.config.grid, &mut rng);
        let none = NursingConfig {
            n_shifts: 0,
            ..NursingConfig::ours()
        };
        let (same, trace) = iter_refine(&params, &x, 0.8, &text, &prompt, &none).unwrap();
        assert_eq!(same, x);
        assert_eq!(trace.len(), 1);
        let five = NursingConfig {
            n_shifts: 5,
            ..NursingConfig::ours()
        };
        let (moved, trace) = iter_refine(&params, &x, 0.8, &text, &prompt, &five).unwrap();
        assert_eq!(trace.len(), 6);
        assert_ne!(moved, x);
    }

    #[test]
    fn guidance_with_zero_step_is_identity() {
        let (params, prompt) = small_model();
        let text = embed_prompt(&params, &prompt).unwrap();
        let x: Latent<f64> = crate::model::train::standard_normal(
            params.config.grid,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let cfg = NursingConfig {
            gsng_alpha: 0.0,
            ..NursingConfig::ours_plus()
        };
        let (next, loss) = gsn_guidance(&params, &x, 0.5, &text, &prompt, &cfg).unwrap();
        assert_eq!(next, x);
        assert!(loss.total >= 0.0 && loss.total <= 1.5);
    }
}
