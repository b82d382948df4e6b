//! Optimizers and schedules: Adam, SGD with momentum, cosine learning rate
//! with restarts, and stochastic weight averaging.
//!
//! Optimizer state is indexed by parameter position in the [`ParamStore`],
//! which has a fixed layout after construction, so state never goes stale.

use serde::{Deserialize, Serialize};

use crate::error::{CassError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}


/// Cosine learning rate with period `t` and restarts:
/// `lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi (step mod t) / t))`.
///
/// `lr(0) = lr_max`, and the schedule restarts at `lr_max` every `t` steps.
pub fn cosine_lr(step: u64, lr_max: f64, lr_min: f64, t: u64) -> f64 {
    assert!(t > 0, "cosine period must be positive");
    let x = (step % t) as f64 / t as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Single cosine anneal without restart, reaching exactly `lr_min` at
/// `total` steps and staying there after.
pub fn cosine_anneal(step: u64, lr_max: f64, lr_min: f64, total: u64) -> f64 {
    assert!(total > 0, "anneal length must be positive");
    let x = (step.min(total)) as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * x).cos())
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Adam {
        Adam::with_config(store, 0.9, 0.999, 1e-8, 0.0)
    }

    pub fn with_config(
        store: &ParamStore,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    ) -> Adam {
        let sizes: Vec<usize> = store.iter().map(|p| p.value.len()).collect();
        Adam {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(CassError::Contract(format!(
                "optimizer built for {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, p) in store.iter_mut().enumerate() {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let g = grad[i] + self.weight_decay * value[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    v: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            weight_decay,
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.v.len() {
            return Err(CassError::Contract(format!(
                "optimizer built for {} tensors, store has {}",
                self.v.len(),
                store.len()
            )));
        }
        for (slot, p) in store.iter_mut().enumerate() {
            let v = &mut self.v[slot];
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for i in 0..value.len() {
                let g = grad[i] + self.weight_decay * value[i];
                v[i] = self.momentum * v[i] + g;
                value[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Dispatch wrapper so trainers can hold either optimizer behind one type.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl Optimizer {
    pub fn build(kind: OptimizerKind, store: &ParamStore) -> Optimizer {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(store)),
            OptimizerKind::Sgd => Optimizer::Sgd(SgdMomentum::new(store, 0.9, 0.0)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(store, lr),
            Optimizer::Sgd(s) => s.step(store, lr),
        }
    }
}

/// First epoch (1-based) that contributes to the stochastic weight average:
/// the final quarter of training, `ceil(0.75 * epochs)`.
pub fn swa_start_epoch(epochs: usize) -> usize {
    ((0.75 * epochs as f64).ceil() as usize).max(1)
}

/// Running equal-weight average of parameter snapshots:
/// `new_avg = (n * avg + current) / (n + 1)`.
#[derive(Debug, Clone, Default)]
pub struct SwaAverager {
    n: u64,
    avg: Vec<Vec<f64>>,
}

impl SwaAverager {
    pub fn new() -> SwaAverager {
        SwaAverager::default()
    }

    /// Number of snapshots folded in so far.
    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn update(&mut self, store: &ParamStore) -> Result<()> {
        if self.n == 0 {
            self.avg = store.iter().map(|p| p.value.data().to_vec()).collect();
            self.n = 1;
            return Ok(());
        }
        if store.len() != self.avg.len() {
            return Err(CassError::Contract(format!(
                "averager holds {} tensors, store has {}",
                self.avg.len(),
                store.len()
            )));
        }
        let n = self.n as f64;
        for (slot, p) in store.iter().enumerate() {
            let avg = &mut self.avg[slot];
            for (a, &cur) in avg.iter_mut().zip(p.value.data()) {
                *a = (n * *a + cur) / (n + 1.0);
            }
        }
        self.n += 1;
        Ok(())
    }

    /// Writes the averaged values into `store` (layout must match).
    pub fn write_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.n == 0 {
            return Err(CassError::Contract(
                "cannot write an empty weight average".into(),
            ));
        }
        if store.len() != self.avg.len() {
            return Err(CassError::Contract(format!(
                "averager holds {} tensors, store has {}",
                self.avg.len(),
                store.len()
            )));
        }
        for (slot, p) in store.iter_mut().enumerate() {
            if p.value.len() != self.avg[slot].len() {
                return Err(CassError::Contract(format!(
                    "tensor '{}' size mismatch when writing average",
                    p.name
                )));
            }
            p.value.data_mut().copy_from_slice(&self.avg[slot]);
        }
        Ok(())
    }
}
