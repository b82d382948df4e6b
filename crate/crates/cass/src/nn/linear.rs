//! Fully connected layer over the trailing dimension.

use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use rand::Rng;

use super::store::{normal_tensor, ParamId, ParamStore};

/// `y = x W^T + b` with `W` stored as `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Activations needed to run the backward pass.
pub struct LinearCache {
    input: Tensor,
    rows: usize,
}

impl Linear {
    /// Kaiming-style init: `W ~ N(0, sqrt(2/in))`, zero bias.
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let w = ps.add(&format!("{name}.weight"), normal_tensor(rng, &[out_dim, in_dim], std));
        let b = ps.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Same layout but `W ~ N(0, std)`; used by transformer blocks.
    pub fn new_with_std<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
    ) -> Self {
        let w = ps.add(&format!("{name}.weight"), normal_tensor(rng, &[out_dim, in_dim], std));
        let b = ps.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear { w, b, in_dim, out_dim }
    }

    /// Input `(rows, in_dim)` with any leading shape flattened by the caller.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, LinearCache) {
        let rows = x.len() / self.in_dim;
        debug_assert_eq!(rows * self.in_dim, x.len());
        let mut out = Tensor::zeros(&[rows, self.out_dim]);
        mm_nt(
            x.data(),
            ps.value(self.w).data(),
            out.data_mut(),
            rows,
            self.in_dim,
            self.out_dim,
        );
        let b = ps.value(self.b).data();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * self.out_dim..(r + 1) * self.out_dim];
            for (o, &bias) in row.iter_mut().zip(b) {
                *o += bias;
            }
        }
        (out, LinearCache { input: x.clone(), rows })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &LinearCache, grad_out: &Tensor) -> Tensor {
        let rows = cache.rows;
        debug_assert_eq!(grad_out.len(), rows * self.out_dim);

        // grad_W (out,in) += G^T (out,rows) * X (rows,in)
        mm_tn(
            grad_out.data(),
            cache.input.data(),
            ps.grad_mut(self.w).data_mut(),
            rows,
            self.out_dim,
            self.in_dim,
        );

        let gb = ps.grad_mut(self.b).data_mut();
        for r in 0..rows {
            let g_row = &grad_out.data()[r * self.out_dim..(r + 1) * self.out_dim];
            for (acc, &g) in gb.iter_mut().zip(g_row) {
                *acc += g;
            }
        }

        // grad_X (rows,in) = G (rows,out) * W (out,in)
        let mut gx = Tensor::zeros(cache.input.shape());
        mm_nn(
            grad_out.data(),
            ps.value(self.w).data(),
            gx.data_mut(),
            rows,
            self.out_dim,
            self.in_dim,
        );
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_manual_matmul() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut ps, &mut rng, "fc", 3, 2);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let (y, _) = lin.forward(&ps, &x);
        let w = ps.value(lin.w).data();
        let b = ps.value(lin.b).data();
        for r in 0..2 {
            for o in 0..2 {
                let want: f64 =
                    (0..3).map(|i| x.data()[r * 3 + i] * w[o * 3 + i]).sum::<f64>() + b[o];
                assert!((y.data()[r * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut ps, &mut rng, "fc", 4, 3);
        let x = Tensor::from_vec(&[2, 4], (0..8).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let w_up: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).cos()).collect();

        // Scalar objective: <upstream, forward(x)>
        let loss_of = |ps_eval: &ParamStore, x_eval: &Tensor| {
            let (y, _) = lin.forward(ps_eval, x_eval);
            y.data().iter().zip(&w_up).map(|(a, b)| a * b).sum::<f64>()
        };

        let (y, cache) = lin.forward(&ps, &x);
        assert_eq!(y.shape(), &[2, 3]);
        let grad_out = Tensor::from_vec(&[2, 3], w_up.clone()).unwrap();
        let gx = lin.backward(&mut ps, &cache, &grad_out);

        let fd_x = gradcheck::central_diff(x.data(), 1e-5, |xd| {
            loss_of(&ps, &Tensor::from_vec(&[2, 4], xd.to_vec()).unwrap())
        });
        assert!(gradcheck::max_rel_err(gx.data(), &fd_x) < 1e-7);

        let w_id = lin.w;
        let fd_w = gradcheck::central_diff(ps.value(w_id).data(), 1e-5, |wd| {
            let mut ps2 = ps.clone();
            ps2.value_mut(w_id).data_mut().copy_from_slice(wd);
            loss_of(&ps2, &x)
        });
        assert!(gradcheck::max_rel_err(ps.grad(w_id).data(), &fd_w) < 1e-7);

        let b_id = lin.b;
        let fd_b = gradcheck::central_diff(ps.value(b_id).data(), 1e-5, |bd| {
            let mut ps2 = ps.clone();
            ps2.value_mut(b_id).data_mut().copy_from_slice(bd);
            loss_of(&ps2, &x)
        });
        assert!(gradcheck::max_rel_err(ps.grad(b_id).data(), &fd_b) < 1e-7);
    }
}
