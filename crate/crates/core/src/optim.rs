//! Named parameter storage and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

/// Parameters by unique name, with their gradients and Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    by_name: BTreeMap<String, ParamId>,
    accumulated: usize,
    steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(contract(format!("duplicate parameter name `{name}`")));
        }
        let n = value.numel();
        let id = ParamId(self.slots.len());
        self.slots.push(Slot {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
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

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                detail: format!("{}: {:?} vs {:?}", slot.name, slot.value.shape(), value.shape()),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.slots[id.0].grad
    }

    pub fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let slot = &mut self.slots[id.0];
        slot.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        self.accumulated += 1;
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.accumulated = 0;
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for slot in &mut self.slots {
            slot.grad.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(self.slots.iter().flat_map(|s| s.grad.iter()).map(|g| g * g).sum())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Copies every value (not optimizer state).
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.slots.len() {
            return Err(contract("snapshot does not match the store"));
        }
        for (i, v) in values.iter().enumerate() {
            self.set_value(ParamId(i), v.clone())?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// `scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`
    InverseSqrtWarmup { d_model: usize, warmup: u64, scale: f64 },
}

impl Schedule {
    /// Rate for the 1-based step `step`.
    pub fn rate(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant(lr) => lr,
            Schedule::InverseSqrtWarmup { d_model, warmup, scale } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                let arg = f64::min(1.0 / libm::sqrt(s), s * libm::pow(w, -1.5));
                scale * arg / libm::sqrt(d_model as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_norm: Option<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9, max_norm: Some(5.0) }
    }
}

impl Adam {
    /// One update using the gradients currently held by `store`.
    pub fn step(&self, store: &mut ParamStore, schedule: &Schedule) -> Result<()> {
        if store.accumulated == 0 {
            return Err(contract("optimizer step without accumulated gradients"));
        }
        if let Some(max_norm) = self.max_norm {
            let norm = store.grad_norm();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm"));
            }
            if norm > max_norm {
                store.scale_grads(max_norm / norm);
            }
        }
        store.steps += 1;
        let t = store.steps;
        let lr = schedule.rate(t);
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for slot in &mut store.slots {
            let moments = slot.first_moment.iter_mut().zip(slot.second_moment.iter_mut());
            for ((x, &g), (m, v)) in slot.value.data_mut().iter_mut().zip(&slot.grad).zip(moments) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= lr * (*m / bc1) / (libm::sqrt(*v / bc2) + self.eps);
            }
        }
        Ok(())
    }
}

/// Uniform(-bound, bound).
pub fn init_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Glorot uniform: bound `sqrt(6 / (fan_in + fan_out))`.
pub fn init_glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    init_uniform(rng, rows, cols, bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn step_on_square_descends() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        g.accumulate_into(&mut store);
        Adam::default().step(&mut store, &Schedule::Constant(1e-2)).unwrap();
        assert!(store.value(w).data()[0].abs() < 1.0);
    }

    #[test]
    fn step_without_gradients_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let err = Adam::default().step(&mut store, &Schedule::Constant(1e-3)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn warmup_rises_then_decays() {
        let s = Schedule::InverseSqrtWarmup { d_model: 64, warmup: 100, scale: 1.0 };
        for step in 1..100 {
            assert!(s.rate(step + 1) > s.rate(step), "step {step}");
        }
        for step in 100..400 {
            assert!(s.rate(step + 1) < s.rate(step), "step {step}");
        }
    }

    #[test]
    fn least_squares_converges() {
        // minimise |A w - b|^2 with a consistent system, optimum loss 0
        let a = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]).unwrap();
        let target = Tensor::matrix(4, 1, vec![0.5, -0.25, 0.25, 0.75]).unwrap();
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::zeros(&[2, 1])).unwrap();
        let adam = Adam { max_norm: None, ..Adam::default() };
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let mut g = Graph::new();
            let av = g.constant(a.clone());
            let bv = g.constant(target.clone());
            let wv = g.param(&store, w);
            let pred = g.matmul(av, wv).unwrap();
            let diff = g.sub(pred, bv).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let loss = g.sum(sq).unwrap();
            last = g.value(loss).data()[0];
            g.backward(loss).unwrap();
            store.zero_grad();
            g.accumulate_into(&mut store);
            adam.step(&mut store, &Schedule::Constant(0.05)).unwrap();
        }
        assert!(last < 1e-3, "final loss {last}");
    }
}
