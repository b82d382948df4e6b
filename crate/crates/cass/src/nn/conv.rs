//! 2-D convolution via im2col and the shared matmul kernels.
//!
//! Weights are stored as `(cout, cin*k*k)` so both forward and the two
//! backward products are plain matrix multiplies. The backward pass
//! recomputes the column matrix from the cached input instead of caching
//! it, trading a little time for a much smaller activation footprint.

use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};
use rand::Rng;

use super::store::{normal_tensor, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    input: Tensor,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = ps.add(&format!("{name}.weight"), normal_tensor(rng, &[cout, fan_in], std));
        let b = ps.add(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2d { w, b, cin, cout, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Input `(B, cin, H, W)`, output `(B, cout, H', W')`.
    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, Conv2dCache) {
        let shape = x.shape();
        debug_assert_eq!(shape.len(), 4);
        debug_assert_eq!(shape[1], self.cin);
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let (hp, wp) = self.out_hw(h, w);
        let positions = hp * wp;
        let ckk = self.cin * self.k * self.k;

        let mut out = Tensor::zeros(&[b, self.cout, hp, wp]);
        let mut cols = vec![0.0; positions * ckk];
        let mut out_mat = vec![0.0; positions * self.cout];
        let weights = ps.value(self.w).data();
        let bias = ps.value(self.b).data();

        for img in 0..b {
            let x_img = &x.data()[img * self.cin * h * w..(img + 1) * self.cin * h * w];
            im2col(x_img, self.cin, h, w, self.k, self.stride, self.pad, &mut cols);
            out_mat.iter_mut().for_each(|v| *v = 0.0);
            mm_nt(&cols, weights, &mut out_mat, positions, ckk, self.cout);
            let out_img =
                &mut out.data_mut()[img * self.cout * positions..(img + 1) * self.cout * positions];
            for p in 0..positions {
                let row = &out_mat[p * self.cout..(p + 1) * self.cout];
                for (co, (&v, &bv)) in row.iter().zip(bias).enumerate() {
                    out_img[co * positions + p] = v + bv;
                }
            }
        }
        (out, Conv2dCache { input: x.clone() })
    }

    pub fn backward(&self, ps: &mut ParamStore, cache: &Conv2dCache, grad_out: &Tensor) -> Tensor {
        let shape = cache.input.shape();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        let (hp, wp) = self.out_hw(h, w);
        let positions = hp * wp;
        let ckk = self.cin * self.k * self.k;
        debug_assert_eq!(grad_out.shape(), &[b, self.cout, hp, wp]);

        let mut grad_x = Tensor::zeros(shape);
        let mut cols = vec![0.0; positions * ckk];
        let mut g_mat = vec![0.0; positions * self.cout];
        let mut grad_cols = vec![0.0; positions * ckk];

        for img in 0..b {
            let x_img =
                &cache.input.data()[img * self.cin * h * w..(img + 1) * self.cin * h * w];
            im2col(x_img, self.cin, h, w, self.k, self.stride, self.pad, &mut cols);

            let g_img = &grad_out.data()[img * self.cout * positions..(img + 1) * self.cout * positions];
            for p in 0..positions {
                for co in 0..self.cout {
                    g_mat[p * self.cout + co] = g_img[co * positions + p];
                }
            }

            // grad_W (cout, ckk) += G^T (cout, P) * cols (P, ckk)
            mm_tn(
                &g_mat,
                &cols,
                ps.grad_mut(self.w).data_mut(),
                positions,
                self.cout,
                ckk,
            );
            let gb = ps.grad_mut(self.b).data_mut();
            for p in 0..positions {
                for (co, acc) in gb.iter_mut().enumerate() {
                    *acc += g_mat[p * self.cout + co];
                }
            }

            // grad_cols (P, ckk) = G (P, cout) * W (cout, ckk)
            grad_cols.iter_mut().for_each(|v| *v = 0.0);
            mm_nn(
                &g_mat,
                ps.value(self.w).data(),
                &mut grad_cols,
                positions,
                self.cout,
                ckk,
            );
            let gx_img =
                &mut grad_x.data_mut()[img * self.cin * h * w..(img + 1) * self.cin * h * w];
            col2im(&grad_cols, self.cin, h, w, self.k, self.stride, self.pad, gx_img);
        }
        grad_x
    }
}

/// Gathers k×k patches of one `(C, H, W)` image into `(H'·W', C·k·k)` rows.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f64]) {
    let hp = (h + 2 * pad - k) / stride + 1;
    let wp = (w + 2 * pad - k) / stride + 1;
    let ckk = c * k * k;
    for oy in 0..hp {
        for ox in 0..wp {
            let row = &mut cols[(oy * wp + ox) * ckk..(oy * wp + ox + 1) * ckk];
            let mut idx = 0;
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-adds column gradients back onto the `(C, H, W)` image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, gx: &mut [f64]) {
    let hp = (h + 2 * pad - k) / stride + 1;
    let wp = (w + 2 * pad - k) / stride + 1;
    let ckk = c * k * k;
    for oy in 0..hp {
        for ox in 0..wp {
            let row = &cols[(oy * wp + ox) * ckk..(oy * wp + ox + 1) * ckk];
            let mut idx = 0;
            for ci in 0..c {
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            gx[ci * h * w + iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[allow(clippy::too_many_arguments)]
    fn naive_conv(
        x: &Tensor,
        w: &[f64],
        bias: &[f64],
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let (b, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let hp = (h + 2 * pad - k) / stride + 1;
        let wp = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[b, cout, hp, wp]);
        for img in 0..b {
            for co in 0..cout {
                for oy in 0..hp {
                    for ox in 0..wp {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        let xv = x.data()[((img * cin + ci) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize];
                                        let wv = w[co * cin * k * k + (ci * k + ky) * k + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((img * cout + co) * hp + oy) * wp + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 2, 3, 3, 2, 1);
        let x = Tensor::from_vec(
            &[2, 2, 5, 5],
            (0..100).map(|i| (i as f64 * 0.17).sin()).collect(),
        )
        .unwrap();
        let (y, _) = conv.forward(&ps, &x);
        let want = naive_conv(&x, ps.value(conv.w).data(), ps.value(conv.b).data(), 2, 3, 3, 2, 1);
        assert_eq!(y.shape(), want.shape());
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv2d::new(&mut ps, &mut rng, "c", 2, 2, 3, 1, 1);
        let x = Tensor::from_vec(
            &[1, 2, 4, 4],
            (0..32).map(|i| (i as f64 * 0.23).cos()).collect(),
        )
        .unwrap();
        let up: Vec<f64> = (0..32).map(|i| (i as f64 * 0.41).sin()).collect();

        let loss_of = |ps_eval: &ParamStore, x_eval: &Tensor| {
            let (y, _) = conv.forward(ps_eval, x_eval);
            y.data().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };

        let (y, cache) = conv.forward(&ps, &x);
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        let grad_out = Tensor::from_vec(&[1, 2, 4, 4], up.clone()).unwrap();
        let gx = conv.backward(&mut ps, &cache, &grad_out);

        let fd_x = gradcheck::central_diff(x.data(), 1e-5, |xd| {
            loss_of(&ps, &Tensor::from_vec(&[1, 2, 4, 4], xd.to_vec()).unwrap())
        });
        assert!(gradcheck::max_rel_err(gx.data(), &fd_x) < 1e-6);

        for id in [conv.w, conv.b] {
            let fd = gradcheck::central_diff(ps.value(id).data(), 1e-5, |vd| {
                let mut ps2 = ps.clone();
                ps2.value_mut(id).data_mut().copy_from_slice(vd);
                loss_of(&ps2, &x)
            });
            assert!(gradcheck::max_rel_err(ps.grad(id).data(), &fd) < 1e-6);
        }
    }
}
