//! Named parameter storage shared by a model's layers.
//!
//! Layers hold [`ParamId`] handles rather than the tensors themselves, so
//! optimizers, weight averaging, EMA copies, and checkpoints can all walk
//! one flat list. Insertion order is fixed at model build time, which makes
//! initialization and serialization deterministic.

use crate::error::{CassError, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// A named parameter and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat, insertion-ordered collection of a model's parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Registers a tensor under a unique name and returns its handle.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(ParamTensor {
            name: name.to_string(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Copies parameter values from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(CassError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(other.params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(CassError::Contract(format!(
                    "parameter layout mismatch at {} vs {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Standard normal draw via Box-Muller; deterministic given the generator.
pub fn draw_normal<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen::<f64>();
        let u2: f64 = rng.gen::<f64>();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Tensor of i.i.d. normal entries scaled by `std`.
pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| draw_normal(rng) * std).collect();
    Tensor::from_vec(shape, data).expect("shape/data length agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn add_and_lookup_roundtrip() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::filled(&[2, 3], 1.5));
        assert_eq!(ps.value(id).data(), &[1.5; 6]);
        assert_eq!(ps.param_count(), 6);
        assert_eq!(ps.find("w"), Some(id));
        assert_eq!(ps.find("missing"), None);
    }

    #[test]
    fn zero_grads_clears_accumulation() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::zeros(&[4]));
        ps.grad_mut(id).data_mut()[2] = 3.0;
        ps.zero_grads();
        assert_eq!(ps.grad(id).data(), &[0.0; 4]);
    }

    #[test]
    fn normal_draws_are_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let ta = normal_tensor(&mut a, &[8], 0.02);
        let tb = normal_tensor(&mut b, &[8], 0.02);
        assert_eq!(ta.data(), tb.data());
    }
}
