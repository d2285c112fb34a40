use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    has_grad: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    frozen: bool,
}

/// Named trainable tensors with their Adam moment buffers.
///
/// Gradients accumulate across backward passes until [`zero_grad`] is called.
///
/// [`zero_grad`]: ParamStore::zero_grad
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Autodiff(format!("parameter `{name}` already exists")));
        }
        let id = ParamId(self.slots.len());
        let n = value.len();
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            has_grad: false,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].grad
    }

    pub fn has_grad(&self, id: ParamId) -> bool {
        self.slots[id.0].has_grad
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.slots[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.slots[id.0].frozen = frozen;
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        let slot = &mut self.slots[id.0];
        for (a, b) in slot.grad.iter_mut().zip(g) {
            *a += b;
        }
        slot.has_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g = 0.0);
            s.has_grad = false;
        }
    }

    /// Multiply all accumulated gradients by `factor`.
    pub fn scale_grads(&mut self, factor: f64) {
        for s in &mut self.slots {
            s.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Whether every accumulated gradient is finite.
    pub fn grads_finite(&self) -> bool {
        self.slots.iter().all(|s| s.grad.iter().all(|g| g.is_finite()))
    }

    /// One bias-corrected Adam update of every unfrozen parameter that
    /// received a gradient since the last [`zero_grad`](Self::zero_grad).
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.slots.iter().any(|s| s.has_grad && !s.frozen) {
            return Err(Error::Autodiff("adam step without any gradient".into()));
        }
        for s in &mut self.slots {
            if !s.has_grad || s.frozen {
                continue;
            }
            s.step += 1;
            let c1 = 1.0 - cfg.beta1.powi(s.step as i32);
            let c2 = 1.0 - cfg.beta2.powi(s.step as i32);
            let data = s.value.data_mut();
            for i in 0..data.len() {
                let g = s.grad[i];
                s.m[i] = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g;
                s.v[i] = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = s.m[i] / c1;
                let vhat = s.v[i] / c2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Drop optimizer state (moments and step counts).
    pub fn reset_optimizer(&mut self) {
        for s in &mut self.slots {
            s.m.iter_mut().for_each(|x| *x = 0.0);
            s.v.iter_mut().for_each(|x| *x = 0.0);
            s.step = 0;
        }
    }

    /// Snapshot of all parameter values, in id order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.slots.len());
        for (s, v) in self.slots.iter_mut().zip(values) {
            assert_eq!(s.value.shape(), v.shape());
            s.value = v.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::new(&[v.len()], v.to_vec()).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, _) = store_with(&[1.0]);
        assert!(s.add("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn step_without_gradient_is_an_error() {
        let (mut s, _) = store_with(&[1.0]);
        assert!(s.adam_step(&AdamConfig::default()).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = store_with(&[1.5, -2.0]);
        s.accumulate(id, &[0.0, 0.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_by_lr_sign() {
        let (mut s, id) = store_with(&[0.0, 0.0]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut prev = s.value(id).data().to_vec();
        for step in 0..500 {
            s.zero_grad();
            s.accumulate(id, &[3.0, -0.2]);
            s.adam_step(&cfg).unwrap();
            let cur = s.value(id).data().to_vec();
            let d0 = cur[0] - prev[0];
            let d1 = cur[1] - prev[1];
            if step > 100 {
                assert!((d0 + 0.01).abs() < 1e-8, "{d0}");
                assert!((d1 - 0.01).abs() < 1e-7, "{d1}");
            }
            prev = cur;
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let (mut s, id) = store_with(&[1.0]);
        let other = s.add("b", Tensor::scalar(1.0)).unwrap();
        s.set_frozen(id, true);
        s.accumulate(id, &[1.0]);
        s.accumulate(other, &[1.0]);
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.value(id).data(), &[1.0]);
        assert!(s.value(other).item() < 1.0);
    }
}
