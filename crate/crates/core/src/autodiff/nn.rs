//! Named parameter sets, seeded initialization, and the bias-corrected
//! adaptive-moment optimizer.

use super::tape::{Gradients, NodeId, Tape};
use super::NnError;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::BTreeMap;

/// Ordered named tensors; ordering keeps training and serialization
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>, NnError> {
        self.tensors
            .get(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>, NnError> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Registers every tensor on the tape as a differentiable parameter.
    pub fn attach(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.param(name, value.clone())))
            .collect()
    }

    /// Registers every tensor as a frozen constant (no gradients).
    pub fn attach_frozen(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.tensors
            .iter()
            .map(|(name, value)| (name.clone(), tape.constant(value.clone())))
            .collect()
    }

    /// Deterministic content digest, used by tests to prove training and
    /// inference do not touch frozen models.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, value) in &self.tensors {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x1000_0000_01b3);
            }
            for v in value.iter() {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
                }
            }
        }
        h
    }
}

/// Uniform init scaled by 1/sqrt(fan_in).
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let mut arr = ArrayD::zeros(IxDyn(shape));
    for v in arr.iter_mut() {
        *v = rng.random_range(-bound..bound);
    }
    arr
}

#[derive(Debug, Clone, Copy)]
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

/// Per-parameter first/second moment buffers plus the shared step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected adaptive-moment update. Parameters without a gradient
/// entry are left untouched; the step counter always advances.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), NnError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, grad) in &grads.by_name {
        let param = params.get_mut(name)?;
        if param.shape() != grad.shape() {
            return Err(NnError::ShapeMismatch {
                op: "adam_step",
                details: format!("{name}: {:?} vs {:?}", param.shape(), grad.shape()),
            });
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
        for ((p, g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
