use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LabError, Result};

use super::{Real, Tensor};

/// A named trainable tensor together with the snapshot taken when it was created.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    initial_value: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let mut initial_value = value.clone();
        initial_value.clear_grad();
        Self {
            name: name.into(),
            value,
            initial_value,
        }
    }

    /// Rebuilds a parameter whose initial snapshot was stored separately
    /// (checkpoint restore).
    pub fn with_initial(name: impl Into<String>, value: Tensor<T>, initial: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            initial_value: initial,
        }
    }

    pub fn initial_value(&self) -> &Tensor<T> {
        &self.initial_value
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    /// Clears both moments and the step count.
    pub fn zero(&mut self) {
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
        self.t = 0;
    }
}

/// One Adam step with bias correction and decoupled weight decay
/// (`value -= lr·wd·value`). Consumes the gradient slot.
pub fn adam_step<T: Real>(
    p: &mut Parameter<T>,
    s: &mut AdamState<T>,
    weight_decay: f64,
) -> Result<()> {
    let Some(grad) = p.value.take_grad() else {
        return Err(LabError::Contract(format!(
            "adam_step on '{}' without a gradient",
            p.name
        )));
    };
    if s.m.len() != grad.len() {
        return shape_err(format!("adam state length mismatch for '{}'", p.name));
    }
    s.t += 1;
    let (b1, b2) = (T::lit(s.beta1), T::lit(s.beta2));
    let bc1 = 1.0 - s.beta1.powi(s.t as i32);
    let bc2 = 1.0 - s.beta2.powi(s.t as i32);
    let step = T::lit(s.lr / bc1);
    let sqrt_bc2 = T::lit(bc2.sqrt());
    let eps = T::lit(s.eps);
    let decay = T::lit(s.lr * weight_decay);
    let one = T::one();
    for (((w, &g), m), v) in p
        .value
        .data_mut()
        .iter_mut()
        .zip(&grad)
        .zip(s.m.iter_mut())
        .zip(s.v.iter_mut())
    {
        if weight_decay > 0.0 {
            *w -= decay * *w;
        }
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        *w -= step * *m / (v.sqrt() / sqrt_bc2 + eps);
    }
    Ok(())
}

/// `target ← τ·online + (1−τ)·target`
pub fn polyak_update<T: Real>(
    target: &mut Parameter<T>,
    online: &Parameter<T>,
    tau: f64,
) -> Result<()> {
    if target.value.shape() != online.value.shape() {
        return shape_err(format!(
            "polyak_update: '{}' {:?} vs '{}' {:?}",
            target.name,
            target.value.shape(),
            online.name,
            online.value.shape()
        ));
    }
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(LabError::Contract(format!("tau {tau} outside (0, 1]")));
    }
    if tau == 1.0 {
        target
            .value
            .data_mut()
            .copy_from_slice(online.value.data());
        return Ok(());
    }
    let (a, b) = (T::lit(tau), T::lit(1.0 - tau));
    for (t, &o) in target.value.data_mut().iter_mut().zip(online.value.data()) {
        *t = a * o + b * *t;
    }
    Ok(())
}
