use super::{
    time_features, AttentionStack, ModelParams, Prediction, Provenance, Tensor, TextEmbedding,
    Wiring,
};
use crate::error::{Error, Result};
use crate::tensor::{gemm, matmul_acc, softmax_rows, Latent, MatMut, MatRef, Real};

/// Activations kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub(super) x: Vec<T>,
    pub(super) t_feat: Vec<T>,
    pub(super) text: Vec<T>,
    pub(super) tokens: Vec<u32>,
    pub(super) blocks: Vec<BlockCache<T>>,
    pub(super) h_final: Vec<T>,
}

#[derive(Debug, Clone)]
pub(super) struct BlockCache<T> {
    pub h_in: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub h_attn: Vec<T>,
    pub cross: Option<CrossCache<T>>,
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

#[derive(Debug, Clone)]
pub(super) struct CrossCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub h_out: Vec<T>,
}

/// `x·W (+ b)` for `x: m×in`, `W: in×out`.
pub(super) fn linear<T: Real>(x: &[T], m: usize, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Vec<T> {
    let (n_in, n_out) = (w.dims[0], w.dims[1]);
    let mut out = match b {
        Some(b) => b.data.repeat(m),
        None => vec![T::zero(); m * n_out],
    };
    matmul_acc(x, &w.data, &mut out, m, n_in, n_out);
    out
}

#[inline]
pub(super) fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Multi-head scaled dot-product attention. `q: m×d`, `k, v: l×d`. Writes the
/// probabilities `[head][m][l]` into `probs` and adds the head outputs into `out`.
#[allow(clippy::too_many_arguments)]
pub(super) fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    l: usize,
    d: usize,
    n_head: usize,
    key_mask: Option<&[bool]>,
    probs: &mut [T],
    out: &mut [T],
) {
    let dh = d / n_head;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    for h in 0..n_head {
        let off = h * dh;
        let head_probs = &mut probs[h * m * l..(h + 1) * m * l];
        gemm(
            scale,
            MatRef::cols_of(q, m, d, off, dh),
            MatRef::cols_of(k, l, d, off, dh).t(),
            T::zero(),
            MatMut::dense(&mut *head_probs, m, l),
        );
        softmax_rows(head_probs, l, key_mask);
        gemm(
            T::one(),
            MatRef::dense(head_probs, m, l),
            MatRef::cols_of(v, l, d, off, dh),
            T::one(),
            MatMut::cols_of(out, m, d, off, dh),
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

pub fn forward<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
) -> Result<(Prediction<T>, AttentionStack<T>)> {
    let (pred, stack, _) = forward_cached(params, x_t, t_norm, text)?;
    Ok((pred, stack))
}

pub fn forward_cached<T: Real>(
    params: &ModelParams<T>,
    x_t: &Latent<T>,
    t_norm: f64,
    text: &TextEmbedding<T>,
) -> Result<(Prediction<T>, AttentionStack<T>, ForwardCache<T>)> {
    let cfg = &params.config;
    if x_t.shape() != cfg.grid {
        return Err(Error::shape(cfg.grid, x_t.shape()));
    }
    if text.len() != cfg.n_tokens || text.d != cfg.d {
        return Err(Error::shape(
            format!("{}x{} text", cfg.n_tokens, cfg.d),
            format!("{}x{} text", text.len(), text.d),
        ));
    }
    check_finite(x_t.data(), || "input latent".into())?;

    let d = cfg.d;
    let p = cfg.pixels();
    let n = cfg.n_tokens;
    let heads = cfg.n_head;

    let t_feat: Vec<T> = time_features(t_norm, cfg.time_freqs)
        .into_iter()
        .map(T::lit)
        .collect();
    let t_emb = linear(&t_feat, 1, &params.t_proj, Some(&params.t_bias));

    let mut h0 = linear(x_t.data(), p, &params.w_in, Some(&params.b_in));
    for (row, pos) in h0.chunks_exact_mut(d).zip(params.pos.data.chunks_exact(d)) {
        for ((hv, &pv), &tv) in row.iter_mut().zip(pos).zip(&t_emb) {
            *hv += pv + tv;
        }
    }

    let (rows, key_mask, mut h) = match cfg.wiring {
        Wiring::Cross => (p, text.mask.clone(), h0),
        Wiring::Joint => {
            let mut mask = vec![true; p];
            mask.extend_from_slice(&text.mask);
            h0.extend_from_slice(&text.data);
            (p + n, mask, h0)
        }
    };

    let mut blocks = Vec::with_capacity(params.blocks.len());
    let mut maps = Vec::with_capacity(params.blocks.len());
    for (bi, bp) in params.blocks.iter().enumerate() {
        let h_in = h;
        let q = linear(&h_in, rows, &bp.wq, None);
        let k = linear(&h_in, rows, &bp.wk, None);
        let v = linear(&h_in, rows, &bp.wv, None);
        let mut probs = vec![T::zero(); heads * rows * rows];
        let mut h_attn = h_in.clone();
        let self_mask = match cfg.wiring {
            Wiring::Cross => None,
            Wiring::Joint => Some(key_mask.as_slice()),
        };
        attention(
            &q,
            &k,
            &v,
            rows,
            rows,
            d,
            heads,
            self_mask,
            &mut probs,
            &mut h_attn,
        );
        check_finite(&h_attn, || format!("blocks.{bi}.attn"))?;

        let (cross, h_mid) = match &bp.cross {
            Some([cq, ck, cv]) => {
                let q = linear(&h_attn, p, cq, None);
                let k = linear(&text.data, n, ck, None);
                let v = linear(&text.data, n, cv, None);
                let mut probs = vec![T::zero(); heads * p * n];
                let mut h_out = h_attn.clone();
                attention(
                    &q,
                    &k,
                    &v,
                    p,
                    n,
                    d,
                    heads,
                    Some(&key_mask),
                    &mut probs,
                    &mut h_out,
                );
                check_finite(&h_out, || format!("blocks.{bi}.cross_attn"))?;
                maps.push(probs.clone());
                let h_mid = h_out.clone();
                (
                    Some(CrossCache {
                        q,
                        k,
                        v,
                        probs,
                        h_out,
                    }),
                    h_mid,
                )
            }
            None => {
                maps.push(probs.clone());
                (None, h_attn.clone())
            }
        };

        let pre = linear(&h_mid, rows, &bp.w1, Some(&bp.b1));
        let act: Vec<T> = pre.iter().map(|&z| z * sigmoid(z)).collect();
        let mut h_out = linear(&act, rows, &bp.w2, Some(&bp.b2));
        for (o, &r) in h_out.iter_mut().zip(&h_mid) {
            *o += r;
        }
        check_finite(&h_out, || format!("blocks.{bi}.mlp"))?;
        h = h_out;
        blocks.push(BlockCache {
            h_in,
            q,
            k,
            v,
            probs,
            h_attn,
            cross,
            pre,
            act,
        });
    }

    let h_final: Vec<T> = h[..p * d].to_vec();
    let out = linear(&h_final, p, &params.w_out, Some(&params.b_out));
    check_finite(&out, || "head".into())?;

    let (stack_rows, stack_cols, provenance) = match cfg.wiring {
        Wiring::Cross => (
            p,
            n,
            Provenance {
                image_rows: 0..p,
                text_cols: 0..n,
                image_grid: (cfg.grid.h, cfg.grid.w),
            },
        ),
        Wiring::Joint => (
            p + n,
            p + n,
            Provenance {
                image_rows: 0..p,
                text_cols: p..p + n,
                image_grid: (cfg.grid.h, cfg.grid.w),
            },
        ),
    };
    let stack = AttentionStack {
        wiring: cfg.wiring,
        n_head: heads,
        rows: stack_rows,
        cols: stack_cols,
        maps,
        provenance: Some(provenance),
    };
    let pred = Prediction {
        grid: Latent::from_vec(cfg.grid, out)?,
        kind: cfg.prediction,
    };
    let cache = ForwardCache {
        x: x_t.data().to_vec(),
        t_feat,
        text: text.data.clone(),
        tokens: text.tokens.clone(),
        blocks,
        h_final,
    };
    Ok((pred, stack, cache))
}
