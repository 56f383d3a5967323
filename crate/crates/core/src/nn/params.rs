use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Adam updates applied to this tensor (drives bias correction).
    t: u64,
}

/// Named parameter tensors with per-tensor Adam moments.
///
/// Values are kept representable as `f32` after every update so checkpoints
/// (which store 32-bit floats) round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

pub type Grads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
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

pub(crate) fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor) {
        value.data_mut().iter_mut().for_each(|x| *x = snap_f32(*x));
        let n = value.len();
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        );
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn insert_glorot<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-a..a))
            .collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data));
    }

    pub fn insert_normal<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) {
        let dist = Normal::new(0.0, std).unwrap();
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, data));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    /// Raw mutable access, bypassing f32 snapping (used by gradient checks).
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn element_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Puts a parameter on the tape.
    pub fn var(&self, tape: &mut Tape, name: &str) -> Var {
        let t = self
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        tape.param(name, t)
    }

    /// One Adam update with bias correction for every parameter accepted by
    /// `trainable`. Parameters without a gradient entry are left untouched.
    pub fn adam_step(
        &mut self,
        grads: &Grads,
        cfg: &AdamConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            let slot = self.slots.get(name).ok_or_else(|| {
                Error::invalid(format!("gradient for unknown parameter '{name}'"))
            })?;
            if slot.value.len() != g.len() {
                return Err(Error::invalid(format!(
                    "gradient shape {:?} does not match parameter '{name}' {:?}",
                    g.shape(),
                    slot.value.shape()
                )));
            }
        }
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let slot = self.slots.get_mut(name).unwrap();
            slot.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(slot.t as i32);
            let vals = slot.value.data_mut();
            for i in 0..vals.len() {
                let gi = g.data()[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * gi;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                vals[i] = snap_f32(vals[i] - cfg.lr * mhat / (vhat.sqrt() + cfg.eps));
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Drops optimizer moments, keeping values.
    pub fn reset_moments(&mut self) {
        for s in self.slots.values_mut() {
            s.m.iter_mut().for_each(|x| *x = 0.0);
            s.v.iter_mut().for_each(|x| *x = 0.0);
            s.t = 0;
        }
    }
}
