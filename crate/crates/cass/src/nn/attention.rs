//! Multi-head self-attention with exposed attention weights.
//!
//! Inputs are `(B, T, C)` flattened to `(B*T, C)` rows for the projections;
//! per-head views are gathered into contiguous scratch buffers so the score
//! and context products run on the shared matmul kernels. The softmaxed
//! attention tensor `(B, heads, T, T)` is kept in the cache and exposed for
//! analysis taps.

use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use rand::Rng;

use super::linear::{Linear, LinearCache};
use super::store::{ParamStore};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct MhaCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Tensor, // (B, heads, T, T)
    q_cache: LinearCache,
    k_cache: LinearCache,
    v_cache: LinearCache,
    o_cache: LinearCache,
    batch: usize,
    tokens: usize,
}

impl MhaCache {
    /// Row-stochastic attention weights, shape `(B, heads, T, T)`.
    pub fn attention(&self) -> &Tensor {
        &self.attn
    }
}

fn gather_head(src: &[f64], b: usize, tokens: usize, c: usize, head: usize, dh: usize, buf: &mut [f64]) {
    for t in 0..tokens {
        let base = (b * tokens + t) * c + head * dh;
        buf[t * dh..(t + 1) * dh].copy_from_slice(&src[base..base + dh]);
    }
}

fn scatter_head(dst: &mut [f64], b: usize, tokens: usize, c: usize, head: usize, dh: usize, buf: &[f64]) {
    for t in 0..tokens {
        let base = (b * tokens + t) * c + head * dh;
        dst[base..base + dh].copy_from_slice(&buf[t * dh..(t + 1) * dh]);
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by heads {heads}");
        let std = 0.02;
        MultiHeadAttention {
            wq: Linear::new_with_std(ps, rng, &format!("{name}.q"), dim, dim, std),
            wk: Linear::new_with_std(ps, rng, &format!("{name}.k"), dim, dim, std),
            wv: Linear::new_with_std(ps, rng, &format!("{name}.v"), dim, dim, std),
            wo: Linear::new_with_std(ps, rng, &format!("{name}.proj"), dim, dim, std),
            heads,
            dim,
        }
    }

    /// Input `(B, T, C)`; output the same shape.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, MhaCache) {
        let shape = x.shape();
        debug_assert_eq!(shape.len(), 3);
        let (b, t, c) = (shape[0], shape[1], shape[2]);
        debug_assert_eq!(c, self.dim);
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let flat = x.clone().reshape(&[b * t, c]).expect("contiguous reshape");
        let (q, q_cache) = self.wq.forward(ps, &flat);
        let (k, k_cache) = self.wk.forward(ps, &flat);
        let (v, v_cache) = self.wv.forward(ps, &flat);

        let mut attn = Tensor::zeros(&[b, self.heads, t, t]);
        let mut ctx = Tensor::zeros(&[b * t, c]);
        let mut qb = vec![0.0; t * dh];
        let mut kb = vec![0.0; t * dh];
        let mut vb = vec![0.0; t * dh];
        let mut scores = vec![0.0; t * t];
        let mut ctx_b = vec![0.0; t * dh];

        for img in 0..b {
            for head in 0..self.heads {
                gather_head(q.data(), img, t, c, head, dh, &mut qb);
                gather_head(k.data(), img, t, c, head, dh, &mut kb);
                gather_head(v.data(), img, t, c, head, dh, &mut vb);

                scores.iter_mut().for_each(|s| *s = 0.0);
                mm_nt(&qb, &kb, &mut scores, t, dh, t);
                for row in scores.chunks_mut(t) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * scale;
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s * scale - max).exp();
                        sum += *s;
                    }
                    for s in row.iter_mut() {
                        *s /= sum;
                    }
                }
                let attn_off = ((img * self.heads) + head) * t * t;
                attn.data_mut()[attn_off..attn_off + t * t].copy_from_slice(&scores);

                ctx_b.iter_mut().for_each(|v| *v = 0.0);
                mm_nn(&scores, &vb, &mut ctx_b, t, t, dh);
                scatter_head(ctx.data_mut(), img, t, c, head, dh, &ctx_b);
            }
        }

        let (out_flat, o_cache) = self.wo.forward(ps, &ctx);
        let out = out_flat.reshape(&[b, t, c]).expect("contiguous reshape");
        (
            out,
            MhaCache {
                q,
                k,
                v,
                attn,
                q_cache,
                k_cache,
                v_cache,
                o_cache,
                batch: b,
                tokens: t,
            },
        )
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &MhaCache, grad_out: &Tensor) -> Tensor {
        let (b, t, c) = (cache.batch, cache.tokens, self.dim);
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let g_flat = grad_out
            .clone()
            .reshape(&[b * t, c])
            .expect("contiguous reshape");
        let grad_ctx = self.wo.backward(ps, &cache.o_cache, &g_flat);

        let mut grad_q = Tensor::zeros(&[b * t, c]);
        let mut grad_k = Tensor::zeros(&[b * t, c]);
        let mut grad_v = Tensor::zeros(&[b * t, c]);

        let mut gc = vec![0.0; t * dh];
        let mut qb = vec![0.0; t * dh];
        let mut kb = vec![0.0; t * dh];
        let mut vb = vec![0.0; t * dh];
        let mut g_attn = vec![0.0; t * t];
        let mut g_scores = vec![0.0; t * t];
        let mut gq_b = vec![0.0; t * dh];
        let mut gk_b = vec![0.0; t * dh];
        let mut gv_b = vec![0.0; t * dh];

        for img in 0..b {
            for head in 0..self.heads {
                gather_head(grad_ctx.data(), img, t, c, head, dh, &mut gc);
                gather_head(cache.q.data(), img, t, c, head, dh, &mut qb);
                gather_head(cache.k.data(), img, t, c, head, dh, &mut kb);
                gather_head(cache.v.data(), img, t, c, head, dh, &mut vb);
                let attn_off = ((img * self.heads) + head) * t * t;
                let attn = &cache.attn.data()[attn_off..attn_off + t * t];

                // grad wrt attention weights: gc (T,dh) * V^T -> (T,T)
                g_attn.iter_mut().for_each(|v| *v = 0.0);
                mm_nt(&gc, &vb, &mut g_attn, t, dh, t);
                // grad wrt V: attn^T (T,T) * gc (T,dh)
                gv_b.iter_mut().for_each(|v| *v = 0.0);
                mm_tn(attn, &gc, &mut gv_b, t, t, dh);

                // softmax backward rowwise, then undo the score scaling
                for row in 0..t {
                    let a = &attn[row * t..(row + 1) * t];
                    let g = &g_attn[row * t..(row + 1) * t];
                    let dotp: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
                    let gs = &mut g_scores[row * t..(row + 1) * t];
                    for j in 0..t {
                        gs[j] = a[j] * (g[j] - dotp) * scale;
                    }
                }

                gq_b.iter_mut().for_each(|v| *v = 0.0);
                mm_nn(&g_scores, &kb, &mut gq_b, t, t, dh);
                gk_b.iter_mut().for_each(|v| *v = 0.0);
                mm_tn(&g_scores, &qb, &mut gk_b, t, t, dh);

                scatter_head(grad_q.data_mut(), img, t, c, head, dh, &gq_b);
                scatter_head(grad_k.data_mut(), img, t, c, head, dh, &gk_b);
                scatter_head(grad_v.data_mut(), img, t, c, head, dh, &gv_b);
            }
        }

        let gx_q = self.wq.backward(ps, &cache.q_cache, &grad_q);
        let gx_k = self.wk.backward(ps, &cache.k_cache, &grad_k);
        let gx_v = self.wv.backward(ps, &cache.v_cache, &grad_v);

        let mut gx = gx_q;
        for (o, (a, b_)) in gx
            .data_mut()
            .iter_mut()
            .zip(gx_k.data().iter().zip(gx_v.data()))
        {
            *o += a + b_;
        }
        gx.reshape(&[b, t, c]).expect("contiguous reshape")
    }
}
