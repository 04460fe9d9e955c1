use super::forward::{forward_cached, sigmoid, ForwardCache};
use super::{AttentionStack, ModelParams, Prediction, Tensor, TextEmbedding};
use crate::error::{Error, Result};
use crate::tensor::{
    axpy, gemm, matmul_nt_acc, matmul_tn_acc, softmax_backward_in_place, Latent, MatMut, MatRef,
    Real,
};

/// Cotangents of a scalar objective with respect to the two forward outputs.
/// `None` means identically zero.
#[derive(Debug, Clone)]
pub struct Cotangents<T> {
    pub pred: Option<Latent<T>>,
    pub attention: Option<AttentionStack<T>>,
}

/// A scalar function of the model outputs that knows its own gradient.
pub trait Objective<T> {
    fn evaluate(
        &self,
        pred: &Prediction<T>,
        attn: &AttentionStack<T>,
    ) -> Result<(T, Cotangents<T>)>;
}

impl<T, F> Objective<T> for F
where
    F: Fn(&Prediction<T>, &AttentionStack<T>) -> Result<(T, Cotangents<T>)>,
{
    fn evaluate(
        &self,
        pred: &Prediction<T>,
        attn: &AttentionStack<T>,
    ) -> Result<(T, Cotangents<T>)> {
        self(pred, attn)
    }
}

/// Value of `objective` at `x_t` and its gradient with respect to `x_t`.
pub fn vjp_wrt_latent<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
    objective: &impl Objective<T>,
) -> Result<(T, Latent<T>)> {
    let (pred, stack, cache) = forward_cached(params, x_t, t_norm, text)?;
    let (value, cot) = objective.evaluate(&pred, &stack)?;
    let grad = backward(params, &cache, &cot, None)?;
    Ok((value, grad))
}

fn linear_backward<T: Real>(
    x: &[T],
    m: usize,
    w: &Tensor<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    grad_w: Option<&mut Tensor<T>>,
    grad_b: Option<&mut Tensor<T>>,
) {
    let (n_in, n_out) = (w.dims[0], w.dims[1]);
    if let Some(dx) = dx {
        matmul_nt_acc(dy, &w.data, dx, m, n_out, n_in);
    }
    if let Some(gw) = grad_w {
        matmul_tn_acc(x, dy, &mut gw.data, m, n_in, n_out);
    }
    if let Some(gb) = grad_b {
        for row in dy.chunks_exact(n_out) {
            for (g, &v) in gb.data.iter_mut().zip(row) {
                *g += v;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    m: usize,
    l: usize,
    d: usize,
    n_head: usize,
    d_out: Option<&[T]>,
    d_probs: Option<&[T]>,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let dh = d / n_head;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut ds = vec![T::zero(); m * l];
    for h in 0..n_head {
        let off = h * dh;
        let head_probs = &probs[h * m * l..(h + 1) * m * l];
        match d_probs {
            Some(extra) => ds.copy_from_slice(&extra[h * m * l..(h + 1) * m * l]),
            None => ds.iter_mut().for_each(|g| *g = T::zero()),
        }
        if let Some(d_out) = d_out {
            let g = MatRef::cols_of(d_out, m, d, off, dh);
            gemm(
                T::one(),
                g,
                MatRef::cols_of(v, l, d, off, dh).t(),
                T::one(),
                MatMut::dense(&mut ds, m, l),
            );
            gemm(
                T::one(),
                MatRef::dense(head_probs, m, l).t(),
                g,
                T::one(),
                MatMut::cols_of(dv, l, d, off, dh),
            );
        }
        for (p_row, g_row) in head_probs.chunks_exact(l).zip(ds.chunks_exact_mut(l)) {
            softmax_backward_in_place(p_row, g_row);
        }
        gemm(
            scale,
            MatRef::dense(&ds, m, l),
            MatRef::cols_of(k, l, d, off, dh),
            T::one(),
            MatMut::cols_of(dq, m, d, off, dh),
        );
        gemm(
            scale,
            MatRef::dense(&ds, m, l).t(),
            MatRef::cols_of(q, m, d, off, dh),
            T::one(),
            MatMut::cols_of(dk, l, d, off, dh),
        );
    }
}

fn check_finite<T: Real>(data: &[T], layer: impl FnOnce() -> String) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(layer()))
    }
}

fn add_into<T: Real>(acc: &mut Option<Vec<T>>, delta: Vec<T>) {
    match acc {
        Some(a) => a.iter_mut().zip(&delta).for_each(|(x, &y)| *x += y),
        None => *acc = Some(delta),
    }
}

/// Reverse pass. Returns the gradient with respect to the input latent and,
/// when `grads` is given, accumulates parameter gradients into it.
pub(crate) fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    cot: &Cotangents<T>,
    mut grads: Option<&mut ModelParams<T>>,
) -> Result<Latent<T>> {
    let cfg = &params.config;
    let d = cfg.d;
    let p = cfg.pixels();
    let n = cfg.n_tokens;
    let heads = cfg.n_head;
    let joint = cfg.wiring == super::Wiring::Joint;
    let rows = if joint { p + n } else { p };
    let training = grads.is_some();

    if let Some(att) = &cot.attention {
        if att.maps.len() != params.blocks.len() {
            return Err(Error::shape(params.blocks.len(), att.maps.len()));
        }
    }

    let mut dh: Option<Vec<T>> = None;
    if let Some(dpred) = &cot.pred {
        if dpred.shape() != cfg.grid {
            return Err(Error::shape(cfg.grid, dpred.shape()));
        }
        let mut dfinal = vec![T::zero(); rows * d];
        let (gw, gb) = match grads.as_deref_mut() {
            Some(g) => (Some(&mut g.w_out), Some(&mut g.b_out)),
            None => (None, None),
        };
        linear_backward(
            &cache.h_final,
            p,
            &params.w_out,
            dpred.data(),
            Some(&mut dfinal[..p * d]),
            gw,
            gb,
        );
        dh = Some(dfinal);
    }

    let mut d_text = vec![T::zero(); n * d];
    for (bi, (bp, bc)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let extra = cot.attention.as_ref().map(|a| a.maps[bi].as_slice());
        let mut gblock = grads.as_deref_mut().map(|g| &mut g.blocks[bi]);

        // MLP
        let h_mid = match &bc.cross {
            Some(cc) => &cc.h_out,
            None => &bc.h_attn,
        };
        let mut dh_mid = dh.clone();
        if let Some(dy) = &dh {
            let mut d_act = vec![T::zero(); rows * 2 * d];
            let (gw, gb) = match gblock.as_deref_mut() {
                Some(g) => (Some(&mut g.w2), Some(&mut g.b2)),
                None => (None, None),
            };
            linear_backward(&bc.act, rows, &bp.w2, dy, Some(&mut d_act), gw, gb);
            for (g, &z) in d_act.iter_mut().zip(&bc.pre) {
                let s = sigmoid(z);
                *g *= s * (T::one() + z * (T::one() - s));
            }
            let mut d_in = vec![T::zero(); rows * d];
            let (gw, gb) = match gblock.as_deref_mut() {
                Some(g) => (Some(&mut g.w1), Some(&mut g.b1)),
                None => (None, None),
            };
            linear_backward(h_mid, rows, &bp.w1, &d_act, Some(&mut d_in), gw, gb);
            add_into(&mut dh_mid, d_in);
        }

        // Cross attention
        let mut dh_attn = dh_mid.clone();
        if let (Some([cq, ck, cv]), Some(cc)) = (&bp.cross, &bc.cross) {
            if dh_mid.is_some() || extra.is_some() {
                let mut dq = vec![T::zero(); p * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                attention_backward(
                    &cc.q,
                    &cc.k,
                    &cc.v,
                    &cc.probs,
                    p,
                    n,
                    d,
                    heads,
                    dh_mid.as_deref(),
                    extra,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                let mut d_in = vec![T::zero(); p * d];
                let gcross = gblock.as_deref_mut().and_then(|g| g.cross.as_mut());
                match gcross {
                    Some([gq, gk, gv]) => {
                        linear_backward(&bc.h_attn, p, cq, &dq, Some(&mut d_in), Some(gq), None);
                        linear_backward(&cache.text, n, ck, &dk, Some(&mut d_text), Some(gk), None);
                        linear_backward(&cache.text, n, cv, &dv, Some(&mut d_text), Some(gv), None);
                    }
                    None => {
                        linear_backward(&bc.h_attn, p, cq, &dq, Some(&mut d_in), None, None);
                        if training {
                            linear_backward(&cache.text, n, ck, &dk, Some(&mut d_text), None, None);
                            linear_backward(&cache.text, n, cv, &dv, Some(&mut d_text), None, None);
                        }
                    }
                }
                add_into(&mut dh_attn, d_in);
            }
        }

        // Self / joint attention
        let self_extra = if joint { extra } else { None };
        let mut dh_in = dh_attn.clone();
        if dh_attn.is_some() || self_extra.is_some() {
            let mut dq = vec![T::zero(); rows * d];
            let mut dk = vec![T::zero(); rows * d];
            let mut dv = vec![T::zero(); rows * d];
            attention_backward(
                &bc.q,
                &bc.k,
                &bc.v,
                &bc.probs,
                rows,
                rows,
                d,
                heads,
                dh_attn.as_deref(),
                self_extra,
                &mut dq,
                &mut dk,
                &mut dv,
            );
            let mut d_in = vec![T::zero(); rows * d];
            let g = gblock.as_deref_mut();
            let (gq, gk, gv) = match g {
                Some(g) => (Some(&mut g.wq), Some(&mut g.wk), Some(&mut g.wv)),
                None => (None, None, None),
            };
            linear_backward(&bc.h_in, rows, &bp.wq, &dq, Some(&mut d_in), gq, None);
            linear_backward(&bc.h_in, rows, &bp.wk, &dk, Some(&mut d_in), gk, None);
            linear_backward(&bc.h_in, rows, &bp.wv, &dv, Some(&mut d_in), gv, None);
            add_into(&mut dh_in, d_in);
        }
        if let Some(g) = &dh_in {
            check_finite(g, || format!("blocks.{bi}.backward"))?;
        }
        dh = dh_in;
    }

    let mut dx = vec![T::zero(); p * cfg.grid.c];
    if let Some(dh) = &dh {
        let dh0 = &dh[..p * d];
        if joint {
            for (a, &b) in d_text.iter_mut().zip(&dh[p * d..]) {
                *a += b;
            }
        }
        match grads.as_deref_mut() {
            Some(g) => {
                linear_backward(
                    &cache.x,
                    p,
                    &params.w_in,
                    dh0,
                    Some(&mut dx),
                    Some(&mut g.w_in),
                    Some(&mut g.b_in),
                );
                for (gp, &v) in g.pos.data.iter_mut().zip(dh0) {
                    *gp += v;
                }
                let mut dt = vec![T::zero(); d];
                for row in dh0.chunks_exact(d) {
                    for (a, &b) in dt.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                linear_backward(
                    &cache.t_feat,
                    1,
                    &params.t_proj,
                    &dt,
                    None,
                    Some(&mut g.t_proj),
                    Some(&mut g.t_bias),
                );
            }
            None => linear_backward(&cache.x, p, &params.w_in, dh0, Some(&mut dx), None, None),
        }
    }
    if let Some(g) = grads {
        for (j, &tok) in cache.tokens.iter().enumerate() {
            let src = &d_text[j * d..(j + 1) * d];
            let t = tok as usize;
            axpy(T::one(), src, &mut g.tok.data[t * d..(t + 1) * d]);
            axpy(T::one(), src, &mut g.text_pos.data[j * d..(j + 1) * d]);
        }
    }
    check_finite(&dx, || "embed.backward".into())?;
    Latent::from_vec(cfg.grid, dx)
}
