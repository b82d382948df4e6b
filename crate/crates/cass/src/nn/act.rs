//! Elementwise activations.

use crate::tensor::Tensor;

/// Rectified linear unit.
#[derive(Debug, Clone, Copy, Default)]
pub struct Relu;

pub struct ReluCache {
    input: Tensor,
}

impl Relu {
    pub fn forward(&self, x: &Tensor) -> (Tensor, ReluCache) {
        let y = x.map(|v| v.max(0.0));
        (y, ReluCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &ReluCache, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for (gv, &xv) in g.data_mut().iter_mut().zip(cache.input.data()) {
            if xv <= 0.0 {
                *gv = 0.0;
            }
        }
        g
    }
}

/// Gaussian error linear unit, tanh form.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gelu;

pub struct GeluCache {
    input: Tensor,
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Gelu {
    pub fn forward(&self, x: &Tensor) -> (Tensor, GeluCache) {
        (x.map(gelu_scalar), GeluCache { input: x.clone() })
    }

    pub fn backward(&self, cache: &GeluCache, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for (gv, &xv) in g.data_mut().iter_mut().zip(cache.input.data()) {
            *gv *= gelu_grad_scalar(xv);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn relu_forward_and_backward() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let (y, cache) = Relu.forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = Relu.backward(&cache, &Tensor::filled(&[4], 1.0));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        let xs: Vec<f64> = (-8..=8).map(|i| i as f64 * 0.37).collect();
        let x = Tensor::from_vec(&[xs.len()], xs.clone()).unwrap();
        let (_, cache) = Gelu.forward(&x);
        let g = Gelu.backward(&cache, &Tensor::filled(&[xs.len()], 1.0));
        let fd = gradcheck::central_diff(&xs, 1e-5, |v| {
            v.iter().map(|&x| gelu_scalar(x)).sum::<f64>()
        });
        assert!(gradcheck::max_rel_err(g.data(), &fd) < 1e-6);
    }
}
