//! Finite-difference checks of the hand-written reverse pass.

use gsnlab::model::{
    embed_tokens, forward, vjp_wrt_latent, AttentionStack, Cotangents, ModelConfig, ModelParams,
    Prediction, PredictionKind, Wiring,
};
use gsnlab::scenes::{BOS, EOS, PAD};
use gsnlab::tensor::{GridShape, Latent};
use gsnlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(wiring: Wiring, rng: &mut impl Rng) -> ModelConfig {
    let h = rng.random_range(2..=4);
    let w = rng.random_range(2..=4);
    let n_head = rng.random_range(1..=2);
    ModelConfig {
        grid: GridShape::new(h, w, 3),
        d: 4 * n_head,
        n_head,
        blocks: rng.random_range(1..=2),
        vocab: 32,
        n_tokens: 6,
        time_freqs: 4,
        wiring,
        prediction: PredictionKind::Epsilon,
    }
}

fn tokens(rng: &mut impl Rng) -> Vec<u32> {
    let mut t = vec![
        BOS,
        rng.random_range(5..21),
        rng.random_range(5..21),
        EOS,
        PAD,
        PAD,
    ];
    if rng.random_bool(0.5) {
        t[3] = rng.random_range(5..21);
        t[4] = EOS;
    }
    t
}

fn random_latent(shape: GridShape, rng: &mut impl Rng) -> Latent<f64> {
    Latent::from_vec(
        shape,
        (0..shape.len())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect(),
    )
    .unwrap()
}

/// Smooth objective touching both outputs: weighted squares of the prediction
/// plus a weighted sum of every attention probability.
struct Probe {
    wp: Vec<f64>,
    wa: Vec<Vec<f64>>,
}

impl Probe {
    fn new(pred_len: usize, stack: &AttentionStack<f64>, rng: &mut impl Rng) -> Self {
        Self {
            wp: (0..pred_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
            wa: stack
                .maps
                .iter()
                .map(|m| m.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    fn eval(
        &self,
        pred: &Prediction<f64>,
        att: &AttentionStack<f64>,
    ) -> Result<(f64, Cotangents<f64>)> {
        let mut v = 0.0;
        let mut dp = pred.grid.clone();
        for ((d, &x), &w) in dp.data_mut().iter_mut().zip(pred.grid.data()).zip(&self.wp) {
            v += w * x * x;
            *d = 2.0 * w * x;
        }
        let mut da = att.zeros_like();
        for ((m, w), dm) in att.maps.iter().zip(&self.wa).zip(da.maps.iter_mut()) {
            for ((&a, &wi), g) in m.iter().zip(w).zip(dm.iter_mut()) {
                v += wi * a;
                *g = wi;
            }
        }
        Ok((
            v,
            Cotangents {
                pred: Some(dp),
                attention: Some(da),
            },
        ))
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..12 {
        let wiring = if trial % 2 == 0 {
            Wiring::Cross
        } else {
            Wiring::Joint
        };
        let cfg = small_config(wiring, &mut rng);
        let params = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
        let text = embed_tokens(&params, &tokens(&mut rng)).unwrap();
        let x = random_latent(cfg.grid, &mut rng);
        let t = rng.random_range(0.0..1.0);
        let (pred, stack) = forward(&params, &x, t, &text).unwrap();
        let probe = Probe::new(pred.grid.data().len(), &stack, &mut rng);
        let f = |p: &Prediction<f64>, a: &AttentionStack<f64>| probe.eval(p, a);
        let (_, grad) = vjp_wrt_latent(&params, &x, t, &text, &f).unwrap();

        let h = 1e-4;
        let mut num = Vec::new();
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let (pp, ap) = forward(&params, &xp, t, &text).unwrap();
            let (pm, am) = forward(&params, &xm, t, &text).unwrap();
            num.push(
                (probe.eval(&pp, &ap).unwrap().0 - probe.eval(&pm, &am).unwrap().0) / (2.0 * h),
            );
        }
        let diff: f64 = grad
            .data()
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            diff / norm <= 1e-6,
            "trial {trial} {wiring:?}: rel err {}",
            diff / norm
        );
    }
}
