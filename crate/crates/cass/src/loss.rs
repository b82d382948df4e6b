//! The cosine pairing loss between the two arms, with optional output heads.
//!
//! Per sample the loss is `2 - 2 * <F(r), F(t)>` where `F` is L2
//! normalization guarded by `eps`; the batch reduces by mean, so the value
//! stays in `[0, 4]` regardless of batch size.

use crate::error::{CassError, Result};
use crate::tensor::Tensor;

/// Normalization guard used when a caller does not pick its own.
pub const DEFAULT_EPS: f64 = 1e-12;

/// Which arm produced an embedding batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmTag {
    Cnn,
    Transformer,
}

/// A `(B, D)` batch of arm outputs.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub values: Tensor,
    pub arm_tag: ArmTag,
}

impl EmbeddingBatch {
    /// Wraps a `(B, D)` tensor, rejecting empty or non-finite batches.
    pub fn new(values: Tensor, arm_tag: ArmTag) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(CassError::Contract(format!(
                "embedding batch must be rank 2, got shape {:?}",
                values.shape()
            )));
        }
        let (b, d) = (values.shape()[0], values.shape()[1]);
        if b == 0 || d == 0 {
            return Err(CassError::Contract(format!(
                "embedding batch needs B >= 1 and D >= 1, got ({b}, {d})"
            )));
        }
        if !values.all_finite() {
            return Err(CassError::InvalidInput(
                "embedding batch contains non-finite values".into(),
            ));
        }
        Ok(EmbeddingBatch { values, arm_tag })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Optional output head applied to arm logits before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    #[default]
    None,
    Softmax,
    Sigmoid,
}

/// `v / max(||v||, eps)`; zero vectors stay zero.
pub fn normalize_embedding(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(CassError::InvalidInput(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CassError::InvalidInput(
            "normalize_embedding input contains non-finite values".into(),
        ));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(eps);
    Ok(v.iter().map(|x| x / denom).collect())
}

fn check_pair(r: &EmbeddingBatch, t: &EmbeddingBatch, eps: f64) -> Result<(usize, usize)> {
    if eps <= 0.0 {
        return Err(CassError::InvalidInput(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if r.values.shape() != t.values.shape() {
        return Err(CassError::Contract(format!(
            "arm output shapes differ: {:?} vs {:?}",
            r.values.shape(),
            t.values.shape()
        )));
    }
    Ok((r.batch_size(), r.dim()))
}

/// Mean over the batch of `2 - 2 * <F(r_i), F(t_i)>`.
pub fn cass_loss(r: &EmbeddingBatch, t: &EmbeddingBatch, eps: f64) -> Result<f64> {
    let (b, d) = check_pair(r, t, eps)?;
    let rv = r.values.data();
    let tv = t.values.data();
    let mut total = 0.0;
    for i in 0..b {
        let row_r = &rv[i * d..(i + 1) * d];
        let row_t = &tv[i * d..(i + 1) * d];
        let nr = row_r.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        let nt = row_t.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        let dot: f64 = row_r.iter().zip(row_t).map(|(a, b)| a * b).sum();
        total += 2.0 - 2.0 * dot / (nr * nt);
    }
    Ok(total / b as f64)
}

/// Loss value plus analytic gradients with respect to both arm outputs.
///
/// With `c_i = <r_i, t_i> / (n_r n_t)` and unit rows `r̂, t̂`, the gradient
/// of the per-sample loss with respect to `r_i` is `-(2/n_r)(t̂ - c_i r̂)`,
/// divided by B for the batch mean; symmetric for `t_i`. When a row norm is
/// clamped to `eps` the denominator is constant, so the `c_i r̂` term drops.
pub fn cass_loss_grad(
    r: &EmbeddingBatch,
    t: &EmbeddingBatch,
    eps: f64,
) -> Result<(f64, Tensor, Tensor)> {
    let (b, d) = check_pair(r, t, eps)?;
    let rv = r.values.data();
    let tv = t.values.data();
    let mut grad_r = Tensor::zeros(r.values.shape());
    let mut grad_t = Tensor::zeros(t.values.shape());
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for i in 0..b {
        let row_r = &rv[i * d..(i + 1) * d];
        let row_t = &tv[i * d..(i + 1) * d];
        let norm_r = row_r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_t = row_t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nr = norm_r.max(eps);
        let nt = norm_t.max(eps);
        let dot: f64 = row_r.iter().zip(row_t).map(|(a, b)| a * b).sum();
        let cos = dot / (nr * nt);
        total += 2.0 - 2.0 * cos;

        let gr = &mut grad_r.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            let mut g = row_t[j] / (nr * nt);
            if norm_r > eps {
                g -= cos * row_r[j] / (nr * nr);
            }
            gr[j] = -2.0 * inv_b * g;
        }
        let gt = &mut grad_t.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            let mut g = row_r[j] / (nr * nt);
            if norm_t > eps {
                g -= cos * row_t[j] / (nt * nt);
            }
            gt[j] = -2.0 * inv_b * g;
        }
    }
    Ok((total * inv_b, grad_r, grad_t))
}

/// Applies the head variant rowwise; `None` is the identity.
pub fn apply_head(e: &EmbeddingBatch, h: HeadVariant) -> EmbeddingBatch {
    match h {
        HeadVariant::None => e.clone(),
        HeadVariant::Sigmoid => EmbeddingBatch {
            values: e.values.map(|x| 1.0 / (1.0 + (-x).exp())),
            arm_tag: e.arm_tag,
        },
        HeadVariant::Softmax => {
            let (b, d) = (e.batch_size(), e.dim());
            let mut out = e.values.clone();
            let data = out.data_mut();
            for i in 0..b {
                let row = &mut data[i * d..(i + 1) * d];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            EmbeddingBatch {
                values: out,
                arm_tag: e.arm_tag,
            }
        }
    }
}

/// Backpropagates an upstream gradient through [`apply_head`].
///
/// `out` must be the head output for the same input; for softmax the row
/// Jacobian contracts to `y * (g - <g, y>)`, for sigmoid to `g * y * (1-y)`.
pub fn apply_head_backward(out: &EmbeddingBatch, grad_out: &Tensor, h: HeadVariant) -> Tensor {
    match h {
        HeadVariant::None => grad_out.clone(),
        HeadVariant::Sigmoid => {
            let mut grad = grad_out.clone();
            for (g, &y) in grad.data_mut().iter_mut().zip(out.values.data()) {
                *g *= y * (1.0 - y);
            }
            grad
        }
        HeadVariant::Softmax => {
            let (b, d) = (out.batch_size(), out.dim());
            let mut grad = Tensor::zeros(grad_out.shape());
            for i in 0..b {
                let y = &out.values.data()[i * d..(i + 1) * d];
                let g = &grad_out.data()[i * d..(i + 1) * d];
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let gr = &mut grad.data_mut()[i * d..(i + 1) * d];
                for j in 0..d {
                    gr[j] = y[j] * (g[j] - gy);
                }
            }
            grad
        }
    }
}
