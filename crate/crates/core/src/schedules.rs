//! Corruption schedules for the two model families, the sampling-step
//! discretization, forward corruption and clean-signal estimation.
//!
//! Both families write `x_t = a_t·x0 + b_t·eps`. Diffusion uses a
//! variance-preserving linear-β schedule over `T` integer steps; flow uses the
//! straight path `a = 1 - τ`, `b = τ` sampled on a `T + 1` point grid with
//! `τ = index / T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Prediction, PredictionKind};
use crate::tensor::{Latent, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Diffusion,
    Flow,
}

impl Family {
    pub fn prediction_kind(self) -> PredictionKind {
        match self {
            Family::Diffusion => PredictionKind::Epsilon,
            Family::Flow => PredictionKind::Velocity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub family: Family,
    pub train_steps: usize,
    pub sampling_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ScheduleConfig {
    pub fn diffusion() -> Self {
        Self {
            family: Family::Diffusion,
            train_steps: 1000,
            sampling_steps: 50,
            beta_min: 1e-4,
            beta_max: 2e-2,
        }
    }

    pub fn flow() -> Self {
        Self {
            family: Family::Flow,
            train_steps: 1000,
            sampling_steps: 28,
            beta_min: 1e-4,
            beta_max: 2e-2,
        }
    }

    pub fn build(&self) -> Result<ScheduleTable> {
        build_schedule(
            self.family,
            self.train_steps,
            self.sampling_steps,
            self.beta_min,
            self.beta_max,
        )
    }
}

/// A resolved position on the sampling trajectory. `sampling_index == S`
/// denotes the clean endpoint reached after the last sampling step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StepRef {
    pub sampling_index: usize,
    pub training_step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    family: Family,
    train_steps: usize,
    a: Vec<f64>,
    b: Vec<f64>,
    sampling_steps: Vec<usize>,
}

pub fn build_schedule(
    family: Family,
    train_steps: usize,
    sampling_steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<ScheduleTable> {
    if sampling_steps == 0 {
        return Err(Error::Config(
            "sampling step count must be at least 1".into(),
        ));
    }
    if train_steps == 0 {
        return Err(Error::Config(
            "training step count must be at least 1".into(),
        ));
    }
    match family {
        Family::Diffusion => {
            if train_steps % sampling_steps != 0 {
                return Err(Error::Config(format!(
                    "sampling steps {sampling_steps} must divide training steps {train_steps}"
                )));
            }
            if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
                return Err(Error::Config(format!(
                    "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
                )));
            }
            let mut a = Vec::with_capacity(train_steps + 1);
            let mut b = Vec::with_capacity(train_steps + 1);
            a.push(1.0);
            b.push(0.0);
            let mut alpha_bar = 1.0f64;
            for t in 1..=train_steps {
                let beta = if train_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * (t - 1) as f64 / (train_steps - 1) as f64
                };
                alpha_bar *= 1.0 - beta;
                a.push(alpha_bar.sqrt());
                b.push((1.0 - alpha_bar).sqrt());
            }
            let stride = train_steps / sampling_steps;
            let steps = (0..sampling_steps)
                .map(|s| (sampling_steps - 1 - s) * stride + 1)
                .collect();
            Ok(ScheduleTable {
                family,
                train_steps,
                a,
                b,
                sampling_steps: steps,
            })
        }
        Family::Flow => {
            let grid = train_steps;
            let a = (0..=grid).map(|i| 1.0 - i as f64 / grid as f64).collect();
            let b = (0..=grid).map(|i| i as f64 / grid as f64).collect();
            let steps: Vec<usize> = (0..sampling_steps)
                .map(|s| {
                    let tau = (sampling_steps - s) as f64 / sampling_steps as f64;
                    (tau * grid as f64).round() as usize
                })
                .collect();
            if steps.windows(2).any(|w| w[0] <= w[1]) || steps.last() == Some(&0) {
                return Err(Error::Config(format!(
                    "{sampling_steps} sampling steps do not fit on a {grid}-interval grid"
                )));
            }
            Ok(ScheduleTable {
                family,
                train_steps,
                a,
                b,
                sampling_steps: steps,
            })
        }
    }
}

impl ScheduleTable {
    pub fn family(&self) -> Family {
        self.family
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn num_sampling_steps(&self) -> usize {
        self.sampling_steps.len()
    }

    pub fn sampling_steps(&self) -> &[usize] {
        &self.sampling_steps
    }

    pub fn a(&self, step: StepRef) -> f64 {
        self.a[step.training_step]
    }

    pub fn b(&self, step: StepRef) -> f64 {
        self.b[step.training_step]
    }

    /// Signal coefficient at a raw training step / grid index.
    pub fn a_at(&self, training_step: usize) -> f64 {
        self.a[training_step]
    }

    pub fn b_at(&self, training_step: usize) -> f64 {
        self.b[training_step]
    }

    /// `ᾱ_t = a_t²` for diffusion.
    pub fn alpha_bar_at(&self, training_step: usize) -> f64 {
        self.a[training_step] * self.a[training_step]
    }

    /// Corruption time normalized to `[0, 1]`, the model's time input.
    pub fn normalized_time(&self, step: StepRef) -> f64 {
        step.training_step as f64 / self.train_steps as f64
    }

    pub fn map_sampling_step(&self, s: usize) -> Result<StepRef> {
        match self.sampling_steps.get(s) {
            Some(&t) => Ok(StepRef {
                sampling_index: s,
                training_step: t,
            }),
            None => Err(Error::Range {
                index: s,
                len: self.sampling_steps.len(),
            }),
        }
    }

    pub fn terminal(&self) -> StepRef {
        StepRef {
            sampling_index: self.sampling_steps.len(),
            training_step: 0,
        }
    }

    /// The step that follows `step` on the sampling trajectory.
    pub fn next(&self, step: StepRef) -> StepRef {
        self.map_sampling_step(step.sampling_index + 1)
            .unwrap_or_else(|_| self.terminal())
    }

    pub fn iter_steps(&self) -> impl Iterator<Item = StepRef> + '_ {
        self.sampling_steps
            .iter()
            .enumerate()
            .map(|(s, &t)| StepRef {
                sampling_index: s,
                training_step: t,
            })
    }
}

pub fn map_sampling_step(s: usize, table: &ScheduleTable) -> Result<StepRef> {
    table.map_sampling_step(s)
}

pub fn forward_corrupt<T: Real>(
    x0: &Latent<T>,
    eps: &Latent<T>,
    step: StepRef,
    table: &ScheduleTable,
) -> Result<Latent<T>> {
    lincomb_wide(x0, table.a(step), eps, table.b(step))
}

/// `alpha * x + beta * y` accumulated in f64 and rounded once.
fn lincomb_wide<T: Real>(x: &Latent<T>, alpha: f64, y: &Latent<T>, beta: f64) -> Result<Latent<T>> {
    let mut out = x.lincomb(T::zero(), y, T::zero())?;
    for ((o, &a), &b) in out.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
        *o = T::lit(alpha * a.f64() + beta * b.f64());
    }
    Ok(out)
}

pub fn estimate_x0<T: Real>(
    x_t: &Latent<T>,
    pred: &Prediction<T>,
    step: StepRef,
    table: &ScheduleTable,
) -> Result<Latent<T>> {
    let want = table.family.prediction_kind();
    if pred.kind != want {
        return Err(Error::Contract(format!(
            "{:?} schedule needs a {:?} prediction, got {:?}",
            table.family, want, pred.kind
        )));
    }
    match table.family {
        Family::Diffusion => {
            let a = table.a(step);
            if a == 0.0 {
                return Err(Error::SingularSchedule {
                    step: step.training_step,
                });
            }
            let b = table.b(step);
            lincomb_wide(x_t, 1.0 / a, &pred.grid, -b / a)
        }
        Family::Flow => lincomb_wide(x_t, 1.0, &pred.grid, table.b(step)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GridShape;

    fn diffusion() -> ScheduleTable {
        ScheduleConfig::diffusion().build().unwrap()
    }

    #[test]
    fn anchors_match_reference_steps() {
        let t = diffusion();
        assert_eq!(t.map_sampling_step(0).unwrap().training_step, 981);
        assert_eq!(t.map_sampling_step(2).unwrap().training_step, 941);
        assert_eq!(t.map_sampling_step(8).unwrap().training_step, 821);
        assert_eq!(t.map_sampling_step(49).unwrap().training_step, 1);
        assert!(matches!(
            t.map_sampling_step(50),
            Err(Error::Range { index: 50, len: 50 })
        ));
    }

    #[test]
    fn diffusion_is_variance_preserving_and_monotone() {
        let t = diffusion();
        for i in 0..=1000 {
            let s = t.a_at(i).powi(2) + t.b_at(i).powi(2);
            assert!((s - 1.0).abs() < 1e-6, "t={i}: {s}");
        }
        for i in 1..1000 {
            assert!(t.alpha_bar_at(i + 1) < t.alpha_bar_at(i));
        }
        assert_eq!(t.a_at(0), 1.0);
        assert_eq!(t.b_at(0), 0.0);
        assert!(t.b_at(1000) > 0.99);
    }

    #[test]
    fn flow_is_linear() {
        let t = ScheduleConfig::flow().build().unwrap();
        assert_eq!(t.a_at(250), 0.75);
        assert_eq!(t.b_at(250), 0.25);
        for i in 0..=1000 {
            assert_eq!(t.a_at(i) + t.b_at(i), 1.0);
        }
        assert_eq!(t.b_at(1000), 1.0);
        assert_eq!(t.sampling_steps()[0], 1000);
        assert_eq!(t.sampling_steps().len(), 28);
        assert!(t.sampling_steps().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn configuration_errors() {
        assert!(matches!(
            build_schedule(Family::Diffusion, 1000, 0, 1e-4, 2e-2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_schedule(Family::Diffusion, 1000, 30, 1e-4, 2e-2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_schedule(Family::Diffusion, 1000, 50, 2e-2, 1e-4),
            Err(Error::Config(_))
        ));
        assert!(build_schedule(Family::Flow, 1000, 30, 0.0, 0.0).is_ok());
    }

    #[test]
    fn estimate_x0_scalar_case() {
        // Hand arithmetic: (0.5 - 0.6·0.5) / 0.8 = 0.25.
        let shape = GridShape::new(1, 1, 1);
        let x_t = Latent::from_vec(shape, vec![0.5f64]).unwrap();
        let pred = Prediction {
            grid: Latent::from_vec(shape, vec![0.5]).unwrap(),
            kind: PredictionKind::Epsilon,
        };
        let x0 = x_t.lincomb(1.0 / 0.8, &pred.grid, -0.6 / 0.8).unwrap();
        assert!((x0.data()[0] - 0.25).abs() < 1e-15);

        let t = diffusion();
        let wrong = Prediction {
            grid: pred.grid.clone(),
            kind: PredictionKind::Velocity,
        };
        let step = t.map_sampling_step(0).unwrap();
        assert!(matches!(
            estimate_x0(&x_t, &wrong, step, &t),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn oracle_prediction_recovers_x0() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let shape = GridShape::new(4, 4, 3);
        for table in [diffusion(), ScheduleConfig::flow().build().unwrap()] {
            for t in (1..=1000).step_by(7) {
                let step = StepRef {
                    sampling_index: 0,
                    training_step: t,
                };
                let x0: Vec<f64> = (0..shape.len())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let eps: Vec<f64> = (0..shape.len())
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect();
                let oracle = |x0: &[f64], eps: &[f64]| match table.family() {
                    Family::Diffusion => eps.to_vec(),
                    Family::Flow => x0.iter().zip(eps).map(|(a, b)| a - b).collect(),
                };
                let kind = table.family().prediction_kind();

                let x0_64 = Latent::from_vec(shape, x0.clone()).unwrap();
                let eps_64 = Latent::from_vec(shape, eps.clone()).unwrap();
                let x_t = forward_corrupt(&x0_64, &eps_64, step, &table).unwrap();
                let grid = Latent::from_vec(shape, oracle(&x0, &eps)).unwrap();
                let est = estimate_x0(&x_t, &Prediction { grid, kind }, step, &table).unwrap();
                for (a, b) in est.data().iter().zip(&x0) {
                    assert!((a - b).abs() < 1e-12, "f64 t={t}: {a} vs {b}");
                }

                // In f32 the stored x_t is rounded once; that half ulp is scaled by 1/a.
                let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
                let (x0_32, eps_32) = (f(&x0), f(&eps));
                let back = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
                let x_t = forward_corrupt(
                    &Latent::from_vec(shape, x0_32.clone()).unwrap(),
                    &Latent::from_vec(shape, eps_32.clone()).unwrap(),
                    step,
                    &table,
                )
                .unwrap();
                let grid =
                    Latent::from_vec(shape, f(&oracle(&back(&x0_32), &back(&eps_32)))).unwrap();
                let est = estimate_x0(&x_t, &Prediction { grid, kind }, step, &table).unwrap();
                let scale = match table.family() {
                    Family::Diffusion => 1.0 / table.a(step),
                    Family::Flow => 1.0 + table.b(step),
                };
                for ((a, b), xt) in est.data().iter().zip(&x0_32).zip(x_t.data()) {
                    let bound = (xt.abs().max(1.0) as f64 * f32::EPSILON as f64) * scale + 1.2e-7;
                    assert!(
                        ((a - b).abs() as f64) <= bound,
                        "f32 t={t}: {a} vs {b} (bound {bound:e})"
                    );
                }
            }
        }
    }

    #[test]
    fn corrupt_endpoints() {
        let t = diffusion();
        let shape = GridShape::new(2, 2, 3);
        let x0 = Latent::from_vec(shape, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let eps = Latent::filled(shape, -0.7);
        let clean = forward_corrupt(&x0, &eps, t.terminal(), &t).unwrap();
        assert_eq!(clean, x0);

        let step = t.map_sampling_step(3).unwrap();
        let zero = forward_corrupt(&Latent::zeros(shape), &eps, step, &t).unwrap();
        for v in zero.data() {
            assert_eq!(*v, t.b(step) * -0.7);
        }

        let flow = ScheduleConfig::flow().build().unwrap();
        let mid = StepRef {
            sampling_index: 14,
            training_step: 500,
        };
        let out = forward_corrupt(
            &Latent::filled(shape, 1.0f64),
            &Latent::filled(shape, -1.0),
            mid,
            &flow,
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
