use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::NnError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Slot {
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameters with their gradient accumulators and adaptive-moment
/// state. Keys are iterated in name order, so a full training run is a pure
/// function of (data, seeds) regardless of insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Matrix) {
        let (r, c) = (value.rows, value.cols);
        let slot = Slot {
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        };
        self.slots.insert(name.to_string(), slot);
    }

    pub fn get(&self, name: &str) -> &Matrix {
        &self.slots.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.slots.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    /// Adds `delta` into the named gradient accumulator.
    pub fn accumulate(&mut self, name: &str, delta: &Matrix) {
        self.grad_mut(name).add_assign(delta);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.fill(0.0);
        }
    }

    /// Copies of all parameter values flattened in name order; used by the
    /// finite-difference harnesses.
    pub fn flatten_values(&self) -> Vec<f64> {
        self.slots.values().flat_map(|s| s.value.data.iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.slots.values().flat_map(|s| s.grad.data.iter().copied()).collect()
    }

    pub fn load_flat_values(&mut self, flat: &[f64]) {
        let mut i = 0;
        for slot in self.slots.values_mut() {
            let n = slot.value.data.len();
            slot.value.data.copy_from_slice(&flat[i..i + n]);
            i += n;
        }
        assert_eq!(i, flat.len(), "flat vector does not match parameter count");
    }

    /// One bias-corrected adaptive-moment update over every parameter.
    ///
    /// A non-finite gradient aborts before any parameter is touched, naming
    /// the offending parameter. A zero gradient leaves its parameter exactly
    /// unchanged (the update is 0/(sqrt(0)+eps) = 0).
    pub fn optimizer_step(&mut self, cfg: &AdamConfig) -> Result<(), NnError> {
        for (name, slot) in &self.slots {
            if slot.grad.data.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGrad { name: name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            for i in 0..slot.value.data.len() {
                let g = slot.grad.data[i];
                let m = cfg.beta1 * slot.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * slot.v.data[i] + (1.0 - cfg.beta2) * g * g;
                slot.m.data[i] = m;
                slot.v.data[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                slot.value.data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// One plain gradient-descent update; same non-finite abort rule as
    /// [`optimizer_step`](Self::optimizer_step). Used where a monotone loss
    /// curve matters more than convergence speed.
    pub fn sgd_step(&mut self, lr: f64) -> Result<(), NnError> {
        for (name, slot) in &self.slots {
            if slot.grad.data.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGrad { name: name.clone() });
            }
        }
        self.step += 1;
        for slot in self.slots.values_mut() {
            for i in 0..slot.value.data.len() {
                slot.value.data[i] -= lr * slot.grad.data[i];
            }
        }
        Ok(())
    }

    /// Serializable view: parameter name -> value matrix, for checkpoints.
    pub fn export_values(&self) -> BTreeMap<String, Matrix> {
        self.slots.iter().map(|(k, s)| (k.clone(), s.value.clone())).collect()
    }

    pub fn import_values(&mut self, values: &BTreeMap<String, Matrix>) -> Result<(), NnError> {
        for (name, value) in values {
            match self.slots.get_mut(name) {
                Some(slot) => slot.value = value.clone(),
                None => return Err(NnError::UnknownParam { name: name.clone() }),
            }
        }
        Ok(())
    }
}
