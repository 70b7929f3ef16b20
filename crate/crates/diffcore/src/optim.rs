//! Named parameters, gradient collection, and the Adam optimizer.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
    trainable: bool,
    lr_scale: f64,
}

/// Parameters together with their Adam moment accumulators. One optimizer
/// owns a store; evaluation only needs shared access.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
    step: u64,
}

#[derive(Copy, Clone, Debug, PartialEq)]
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

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.slots.push(Slot {
            name: name.into(),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
            trainable: true,
            lr_scale: 1.0,
        });
        ParamId(self.slots.len() - 1)
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

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    /// Replaces a parameter value; the shape must stay the same.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        self.slots[id.0].value.expect_same_shape(&value, "ParamStore::set")?;
        self.slots[id.0].value = value;
        Ok(())
    }

    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor)) {
        f(&mut self.slots[id.0].value);
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        let s = &self.slots[id.0];
        (&s.m, &s.v)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.slots[id.0].trainable
    }

    /// Frozen parameters are bound as constants and skipped by Adam.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.slots[id.0].trainable = trainable;
    }

    /// Multiplies the learning rate for one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.slots[id.0].lr_scale = scale;
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.slots[id.0].lr_scale
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Places every parameter on `tape`: trainable ones as variables, frozen
    /// ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .slots
            .iter()
            .map(|s| {
                if s.trainable {
                    tape.variable(s.value.clone())
                } else {
                    tape.constant(s.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// One Adam step with bias correction. The whole step is rejected if any
    /// gradient is non-finite.
    pub fn adam_step(&mut self, grads: &[Tensor], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != self.slots.len() {
            return Err(DiffError::InvalidArgument(format!(
                "adam_step: {} gradients for {} parameters",
                grads.len(),
                self.slots.len()
            )));
        }
        for (slot, g) in self.slots.iter().zip(grads) {
            slot.value.expect_same_shape(g, "adam_step")?;
            if !g.all_finite() {
                log::warn!("adam step rejected: non-finite gradient for `{}`", slot.name);
                return Err(DiffError::NonFiniteGradient(slot.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (slot, g) in self.slots.iter_mut().zip(grads) {
            if !slot.trainable {
                continue;
            }
            let lr = cfg.lr * slot.lr_scale;
            let value = slot.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradients of a scalar `loss` with respect to every parameter of `store`.
/// Parameters the loss does not reach get zero gradients.
pub fn grad(tape: &Tape, loss: Var, bound: &Bound, store: &ParamStore) -> Result<Vec<Tensor>> {
    let mut grads = tape.backward(loss)?;
    Ok(store
        .ids()
        .map(|id| {
            grads
                .take(bound.var(id))
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_minus_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        store.adam_step(&[Tensor::scalar(1.0)], &cfg).unwrap();
        // m̂ = 1, v̂ = 1 ⇒ Δ = −0.1 / (1 + 1e-8)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_rows(&[[1.0, -2.0]]));
        store
            .adam_step(&[Tensor::zeros(&[1, 2])], &AdamConfig::default())
            .unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
        assert_eq!(store.moments(id).0.data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let err = store
            .adam_step(&[Tensor::scalar(f64::NAN)], &AdamConfig::default())
            .unwrap_err();
        assert_eq!(err, DiffError::NonFiniteGradient("w".into()));
        assert_eq!(store.get(id).item(), 1.0);
        assert_eq!(store.step_count(), 0);
    }

    #[test]
    fn lr_scale_applies_per_parameter() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(0.0));
        let b = store.add("b", Tensor::scalar(0.0));
        store.set_lr_scale(b, 0.1);
        let cfg = AdamConfig {
            lr: 0.1,
            eps: 0.0,
            ..AdamConfig::default()
        };
        store.adam_step(&[Tensor::scalar(1.0), Tensor::scalar(1.0)], &cfg).unwrap();
        assert!((store.get(a).item() + 0.1).abs() < 1e-15);
        assert!((store.get(b).item() + 0.01).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("a", Tensor::scalar(0.5));
        store.set_trainable(id, false);
        store
            .adam_step(&[Tensor::scalar(3.0)], &AdamConfig::default())
            .unwrap();
        assert_eq!(store.get(id).item(), 0.5);
    }
}
