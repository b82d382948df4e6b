//! Spatial pooling.

use crate::tensor::Tensor;

/// Averages each channel plane of a `(B, C, H, W)` tensor down to `(B, C)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool;

pub struct GlobalAvgPoolCache {
    input_shape: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn forward(&self, x: &Tensor) -> (Tensor, GlobalAvgPoolCache) {
        let shape = x.shape();
        debug_assert_eq!(shape.len(), 4);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut out = Tensor::zeros(&[b, c]);
        for i in 0..b * c {
            let xs = &x.data()[i * plane..(i + 1) * plane];
            out.data_mut()[i] = xs.iter().sum::<f64>() / plane as f64;
        }
        (
            out,
            GlobalAvgPoolCache {
                input_shape: shape.to_vec(),
            },
        )
    }

    pub fn backward(&self, cache: &GlobalAvgPoolCache, grad_out: &Tensor) -> Tensor {
        let (b, c, h, w) = (
            cache.input_shape[0],
            cache.input_shape[1],
            cache.input_shape[2],
            cache.input_shape[3],
        );
        let plane = h * w;
        let mut gx = Tensor::zeros(&cache.input_shape);
        for i in 0..b * c {
            let g = grad_out.data()[i] / plane as f64;
            for v in &mut gx.data_mut()[i * plane..(i + 1) * plane] {
                *v = g;
            }
        }
        gx
    }
}
