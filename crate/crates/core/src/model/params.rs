use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelConfig, Wiring};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    fn normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z * std)
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// Cross-attention projections, present only for cross wiring.
    pub cross: Option<[Tensor<T>; 3]>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub pos: Tensor<T>,
    pub t_proj: Tensor<T>,
    pub t_bias: Tensor<T>,
    pub tok: Tensor<T>,
    pub text_pos: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

impl<T: Real> ModelParams<T> {
    /// Fan-in scaled Gaussian initialization. Residual-branch outputs start
    /// small so the untrained stack is close to the identity.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let c = config.grid.c;
        let p = config.pixels();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|_| {
                let wq = Tensor::normal(&[d, d], inv(d), rng);
                let wk = Tensor::normal(&[d, d], inv(d), rng);
                let wv = Tensor::normal(&[d, d], 0.5 * inv(d), rng);
                let cross = match config.wiring {
                    Wiring::Cross => Some([
                        Tensor::normal(&[d, d], inv(d), rng),
                        Tensor::normal(&[d, d], inv(d), rng),
                        Tensor::normal(&[d, d], 0.5 * inv(d), rng),
                    ]),
                    Wiring::Joint => None,
                };
                BlockParams {
                    wq,
                    wk,
                    wv,
                    cross,
                    w1: Tensor::normal(&[d, 2 * d], inv(d), rng),
                    b1: Tensor::zeros(&[2 * d]),
                    w2: Tensor::normal(&[2 * d, d], 0.5 * inv(2 * d), rng),
                    b2: Tensor::zeros(&[d]),
                }
            })
            .collect();
        Ok(Self {
            config,
            w_in: Tensor::normal(&[c, d], inv(c), rng),
            b_in: Tensor::zeros(&[d]),
            pos: Tensor::normal(&[p, d], 0.5, rng),
            t_proj: Tensor::normal(&[2 * config.time_freqs, d], inv(2 * config.time_freqs), rng),
            t_bias: Tensor::zeros(&[d]),
            tok: Tensor::normal(&[config.vocab, d], 1.0, rng),
            text_pos: Tensor::normal(&[config.n_tokens, d], 0.2, rng),
            blocks,
            w_out: Tensor::normal(&[d, c], 0.1 * inv(d), rng),
            b_out: Tensor::zeros(&[c]),
        })
    }

    /// A zero tensor set with the same layout, used to accumulate gradients.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        out
    }

    /// Visits every tensor in checkpoint order with its name.
    pub fn for_each(&self, mut f: impl FnMut(&str, &Tensor<T>)) {
        f("embed.w_in", &self.w_in);
        f("embed.b_in", &self.b_in);
        f("embed.pos", &self.pos);
        f("time.proj", &self.t_proj);
        f("time.bias", &self.t_bias);
        f("text.tok", &self.tok);
        f("text.pos", &self.text_pos);
        for (i, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{i}.wq"), &b.wq);
            f(&format!("blocks.{i}.wk"), &b.wk);
            f(&format!("blocks.{i}.wv"), &b.wv);
            if let Some([cq, ck, cv]) = &b.cross {
                f(&format!("blocks.{i}.cq"), cq);
                f(&format!("blocks.{i}.ck"), ck);
                f(&format!("blocks.{i}.cv"), cv);
            }
            f(&format!("blocks.{i}.w1"), &b.w1);
            f(&format!("blocks.{i}.b1"), &b.b1);
            f(&format!("blocks.{i}.w2"), &b.w2);
            f(&format!("blocks.{i}.b2"), &b.b2);
        }
        f("head.w_out", &self.w_out);
        f("head.b_out", &self.b_out);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("embed.w_in", &mut self.w_in);
        f("embed.b_in", &mut self.b_in);
        f("embed.pos", &mut self.pos);
        f("time.proj", &mut self.t_proj);
        f("time.bias", &mut self.t_bias);
        f("text.tok", &mut self.tok);
        f("text.pos", &mut self.text_pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{i}.wq"), &mut b.wq);
            f(&format!("blocks.{i}.wk"), &mut b.wk);
            f(&format!("blocks.{i}.wv"), &mut b.wv);
            if let Some([cq, ck, cv]) = &mut b.cross {
                f(&format!("blocks.{i}.cq"), cq);
                f(&format!("blocks.{i}.ck"), ck);
                f(&format!("blocks.{i}.cv"), cv);
            }
            f(&format!("blocks.{i}.w1"), &mut b.w1);
            f(&format!("blocks.{i}.b1"), &mut b.b1);
            f(&format!("blocks.{i}.w2"), &mut b.w2);
            f(&format!("blocks.{i}.b2"), &mut b.b2);
        }
        f("head.w_out", &mut self.w_out);
        f("head.b_out", &mut self.b_out);
    }

    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            &mut self.w_in.data,
            &mut self.b_in.data,
            &mut self.pos.data,
            &mut self.t_proj.data,
            &mut self.t_bias.data,
            &mut self.tok.data,
            &mut self.text_pos.data,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.wq.data);
            out.push(&mut b.wk.data);
            out.push(&mut b.wv.data);
            if let Some([cq, ck, cv]) = &mut b.cross {
                out.push(&mut cq.data);
                out.push(&mut ck.data);
                out.push(&mut cv.data);
            }
            out.push(&mut b.w1.data);
            out.push(&mut b.b1.data);
            out.push(&mut b.w2.data);
            out.push(&mut b.b2.data);
        }
        out.push(&mut self.w_out.data);
        out.push(&mut self.b_out.data);
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.data.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            w_in: self.w_in.cast(),
            b_in: self.b_in.cast(),
            pos: self.pos.cast(),
            t_proj: self.t_proj.cast(),
            t_bias: self.t_bias.cast(),
            tok: self.tok.cast(),
            text_pos: self.text_pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    cross: b
                        .cross
                        .as_ref()
                        .map(|[q, k, v]| [q.cast(), k.cast(), v.cast()]),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            w_out: self.w_out.cast(),
            b_out: self.b_out.cast(),
        }
    }

    /// Checks every tensor against the layout `config` implies.
    pub fn check_layout(&self) -> Result<()> {
        let fresh = Self::layout(self.config)?;
        let mut want = Vec::new();
        fresh.for_each(|name, t| want.push((name.to_string(), t.dims.clone())));
        let mut got = Vec::new();
        self.for_each(|name, t| got.push((name.to_string(), t.dims.clone(), t.data.len())));
        if want.len() != got.len() {
            return Err(Error::Corrupt(format!(
                "expected {} tensors, found {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wd), (gn, gd, len)) in want.iter().zip(&got) {
            if wn != gn || wd != gd || *len != wd.iter().product::<usize>() {
                return Err(Error::Corrupt(format!(
                    "tensor {gn} has dims {gd:?}, expected {wn} {wd:?}"
                )));
            }
        }
        Ok(())
    }

    /// All-zero parameters with the layout `config` implies.
    pub fn layout(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let c = config.grid.c;
        let z = |dims: &[usize]| Tensor::zeros(dims);
        Ok(Self {
            config,
            w_in: z(&[c, d]),
            b_in: z(&[d]),
            pos: z(&[config.pixels(), d]),
            t_proj: z(&[2 * config.time_freqs, d]),
            t_bias: z(&[d]),
            tok: z(&[config.vocab, d]),
            text_pos: z(&[config.n_tokens, d]),
            blocks: (0..config.blocks)
                .map(|_| BlockParams {
                    wq: z(&[d, d]),
                    wk: z(&[d, d]),
                    wv: z(&[d, d]),
                    cross: (config.wiring == Wiring::Cross)
                        .then(|| [z(&[d, d]), z(&[d, d]), z(&[d, d])]),
                    w1: z(&[d, 2 * d]),
                    b1: z(&[2 * d]),
                    w2: z(&[2 * d, d]),
                    b2: z(&[d]),
                })
                .collect(),
            w_out: z(&[d, c]),
            b_out: z(&[c]),
        })
    }
}
