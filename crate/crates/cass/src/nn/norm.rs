//! Group and layer normalization.
//!
//! Both cache the normalized activations and the inverse standard
//! deviation, so backward avoids a second pass over the raw input. Group
//! norm is used in the convolutional arms (batch-size independent, which
//! keeps small-batch training stable); layer norm in the transformer arms.

use crate::tensor::Tensor;

use super::store::{ParamId, ParamStore};

const NORM_EPS: f64 = 1e-5;

/// Normalizes over channel groups of a `(B, C, H, W)` tensor.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

pub struct GroupNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>, // one per (batch, group)
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "channels {channels} not divisible by groups {groups}");
        let gamma = ps.add(&format!("{name}.gamma"), Tensor::filled(&[channels], 1.0));
        let beta = ps.add(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups, channels }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, GroupNormCache) {
        let shape = x.shape();
        debug_assert_eq!(shape.len(), 4);
        debug_assert_eq!(shape[1], self.channels);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let cg = c / self.groups;
        let group_len = cg * h * w;

        let mut x_hat = Tensor::zeros(shape);
        let mut out = Tensor::zeros(shape);
        let mut inv_std = vec![0.0; b * self.groups];
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();

        for img in 0..b {
            for g in 0..self.groups {
                let start = (img * c + g * cg) * h * w;
                let xs = &x.data()[start..start + group_len];
                let mean = xs.iter().sum::<f64>() / group_len as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                    / group_len as f64;
                let istd = 1.0 / (var + NORM_EPS).sqrt();
                inv_std[img * self.groups + g] = istd;

                let xh = &mut x_hat.data_mut()[start..start + group_len];
                for (o, &v) in xh.iter_mut().zip(xs) {
                    *o = (v - mean) * istd;
                }
                let ys = &mut out.data_mut()[start..start + group_len];
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (gm, bt) = (gamma[ch], beta[ch]);
                    for p in 0..h * w {
                        let idx = ci * h * w + p;
                        ys[idx] = gm * x_hat.data()[start + idx] + bt;
                    }
                }
            }
        }
        (out, GroupNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &GroupNormCache,
        grad_out: &Tensor,
    ) -> Tensor {
        let shape = cache.x_hat.shape();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let cg = c / self.groups;
        let group_len = cg * h * w;
        let m = group_len as f64;

        let mut grad_x = Tensor::zeros(shape);
        let gamma: Vec<f64> = ps.value(self.gamma).data().to_vec();

        // Parameter gradients: per-channel sums over batch and space.
        {
            let plane = h * w;
            for img in 0..b {
                for ch in 0..c {
                    let start = (img * c + ch) * plane;
                    let dy = &grad_out.data()[start..start + plane];
                    let xh = &cache.x_hat.data()[start..start + plane];
                    let mut dg = 0.0;
                    let mut db = 0.0;
                    for (y, x) in dy.iter().zip(xh) {
                        dg += y * x;
                        db += y;
                    }
                    ps.grad_mut(self.gamma).data_mut()[ch] += dg;
                    ps.grad_mut(self.beta).data_mut()[ch] += db;
                }
            }
        }

        for img in 0..b {
            for g in 0..self.groups {
                let start = (img * c + g * cg) * h * w;
                let xh = &cache.x_hat.data()[start..start + group_len];
                let dy = &grad_out.data()[start..start + group_len];
                let istd = cache.inv_std[img * self.groups + g];

                // dyp = gamma_c * dy, expanded per channel within the group
                let mut sum_dyp = 0.0;
                let mut sum_dyp_xh = 0.0;
                for ci in 0..cg {
                    let gm = gamma[g * cg + ci];
                    for p in 0..h * w {
                        let idx = ci * h * w + p;
                        let dyp = gm * dy[idx];
                        sum_dyp += dyp;
                        sum_dyp_xh += dyp * xh[idx];
                    }
                }
                let mean_dyp = sum_dyp / m;
                let mean_dyp_xh = sum_dyp_xh / m;

                let gx = &mut grad_x.data_mut()[start..start + group_len];
                for ci in 0..cg {
                    let gm = gamma[g * cg + ci];
                    for p in 0..h * w {
                        let idx = ci * h * w + p;
                        let dyp = gm * dy[idx];
                        gx[idx] = istd * (dyp - mean_dyp - xh[idx] * mean_dyp_xh);
                    }
                }
            }
        }
        grad_x
    }
}

/// Normalizes over the trailing dimension of a `(rows, D)` view.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub struct LayerNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add(&format!("{name}.gamma"), Tensor::filled(&[dim], 1.0));
        let beta = ps.add(&format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, LayerNormCache) {
        let d = self.dim;
        let rows = x.len() / d;
        debug_assert_eq!(rows * d, x.len());
        let mut x_hat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![0.0; rows];
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();

        for (r, slot) in inv_std.iter_mut().enumerate() {
            let xs = &x.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + NORM_EPS).sqrt();
            *slot = istd;
            let xh = &mut x_hat.data_mut()[r * d..(r + 1) * d];
            for (o, &v) in xh.iter_mut().zip(xs) {
                *o = (v - mean) * istd;
            }
            let ys = &mut out.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                ys[j] = gamma[j] * x_hat.data()[r * d + j] + beta[j];
            }
        }
        (out, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &mut ParamStore,
        cache: &LayerNormCache,
        grad_out: &Tensor,
    ) -> Tensor {
        let d = self.dim;
        let rows = cache.x_hat.len() / d;
        let mut grad_x = Tensor::zeros(cache.x_hat.shape());
        let gamma: Vec<f64> = ps.value(self.gamma).data().to_vec();

        for r in 0..rows {
            let xh = &cache.x_hat.data()[r * d..(r + 1) * d];
            let dy = &grad_out.data()[r * d..(r + 1) * d];
            let istd = cache.inv_std[r];

            let mut sum_dyp = 0.0;
            let mut sum_dyp_xh = 0.0;
            for j in 0..d {
                let dyp = gamma[j] * dy[j];
                sum_dyp += dyp;
                sum_dyp_xh += dyp * xh[j];
                ps.grad_mut(self.gamma).data_mut()[j] += dy[j] * xh[j];
                ps.grad_mut(self.beta).data_mut()[j] += dy[j];
            }
            let mean_dyp = sum_dyp / d as f64;
            let mean_dyp_xh = sum_dyp_xh / d as f64;

            let gx = &mut grad_x.data_mut()[r * d..(r + 1) * d];
            for j in 0..d {
                let dyp = gamma[j] * dy[j];
                gx[j] = istd * (dyp - mean_dyp - xh[j] * mean_dyp_xh);
            }
        }
        grad_x
    }
}
