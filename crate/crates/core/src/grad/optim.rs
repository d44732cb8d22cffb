use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named parameters with their Adam moment estimates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: BTreeMap<String, usize>,
    step: u64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter; re-registering a name replaces its value and
    /// resets its moments.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let slot = Slot {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            name: name.clone(),
            value,
        };
        match self.index.get(&name) {
            Some(&i) => self.slots[i] = slot,
            None => {
                self.index.insert(name, self.slots.len());
                self.slots.push(slot);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.slots[i].value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.slots[i].value),
            None => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Records the parameter on `tape` as a trainable leaf.
    pub fn load(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.param(name, self.get(name)?.clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Gradients of zero for every parameter the map does not mention.
    pub fn fill_missing(&self, grads: &mut Gradients) {
        for s in &self.slots {
            if grads.get(&s.name).is_none() {
                grads.insert(s.name.clone(), Tensor::zeros(s.value.shape()));
            }
        }
    }

    /// One Adam update with bias correction.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for s in &self.slots {
            let g = grads
                .get(&s.name)
                .ok_or_else(|| Error::MissingGradient(s.name.clone()))?;
            if g.shape() != s.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), s.name, s.value.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for s in &mut self.slots {
            let g = grads.get(&s.name).expect("checked above");
            let (value, m, v) = (s.value.data_mut(), s.m.data_mut(), s.v.data_mut());
            for i in 0..value.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Glorot-uniform `[fan_in x fan_out]` weight matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = scalar_store(0.7);
        let mut g = Gradients::default();
        g.insert("w", Tensor::scalar(0.0));
        s.adam_step(&g, &AdamConfig::default()).unwrap();
        assert_eq!(s.get("w").unwrap().data()[0], 0.7);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(1.0);
        let mut g = Gradients::default();
        g.insert("w", Tensor::scalar(1.0));
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        s.adam_step(&g, &cfg).unwrap();
        let delta = s.get("w").unwrap().data()[0] - 1.0;
        assert!((delta + 0.01).abs() < 1e-9, "delta = {delta}");
    }

    #[test]
    fn identical_params_with_identical_grads_stay_identical() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(vec![0.3, -0.2]));
        s.insert("b", Tensor::row(vec![0.3, -0.2]));
        for k in 0..5 {
            let mut g = Gradients::default();
            let gv = Tensor::row(vec![0.1 * k as f64, -1.0]);
            g.insert("a", gv.clone());
            g.insert("b", gv);
            s.adam_step(&g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("a").unwrap(), s.get("b").unwrap());
    }

    #[test]
    fn missing_gradient_is_reported_by_name() {
        let mut s = scalar_store(1.0);
        let err = s.adam_step(&Gradients::default(), &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "w"));
        assert_eq!(s.step_count(), 0);
    }
}
