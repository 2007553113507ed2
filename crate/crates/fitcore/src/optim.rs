//! Gradient descent with classical momentum.
//!
//! The velocity buffers are part of the persisted trial state, so an
//! interrupted run resumed from a checkpoint continues bit-exactly.

use crate::autodiff::{Parameter, Shape};
use crate::error::{Error, Result};

/// Stochastic gradient descent over a fixed parameter list.
///
/// The update is `v <- momentum * v + grad; param <- param - lr * v`.
pub struct Sgd {
    params: Vec<Parameter>,
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

/// Serializable snapshot of an optimizer: hyperparameters plus the
/// velocity buffer of every parameter, keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<(String, Shape, Vec<f64>)>,
}

impl Sgd {
    /// Builds an optimizer over `params` with zero-initialized velocity.
    /// Parameter names must be unique so buffers can be persisted.
    pub fn new(params: Vec<Parameter>, learning_rate: f64, momentum: f64) -> Result<Sgd> {
        if learning_rate <= 0.0 || learning_rate.is_nan() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.name() == p.name()) {
                return Err(Error::Config(format!(
                    "duplicate parameter name '{}'",
                    p.name()
                )));
            }
        }
        let velocity = params
            .iter()
            .map(|p| vec![0.0; p.tensor().element_count()])
            .collect();
        Ok(Sgd {
            params,
            learning_rate,
            momentum,
            velocity,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Replaces the learning rate in place; the new rate participates in
    /// [`Sgd::state`], so checkpoints resume with the decayed value.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// Applies one momentum step. Every parameter must already carry a
    /// gradient (a preceding `zero_grad` + `backward` guarantees it).
    pub fn step(&mut self) -> Result<()> {
        for (param, vel) in self.params.iter().zip(self.velocity.iter_mut()) {
            let grad = param.tensor().grad().ok_or_else(|| Error::MissingGrad {
                name: param.name().to_string(),
            })?;
            for (v, g) in vel.iter_mut().zip(grad.iter()) {
                *v = self.momentum * *v + g;
            }
            let lr = self.learning_rate;
            param.tensor().update_values(|values| {
                for (x, v) in values.iter_mut().zip(vel.iter()) {
                    *x -= lr * v;
                }
            });
        }
        Ok(())
    }

    /// Snapshot of hyperparameters and velocity buffers.
    pub fn state(&self) -> SgdState {
        SgdState {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            velocity: self
                .params
                .iter()
                .zip(self.velocity.iter())
                .map(|(p, v)| (p.name().to_string(), p.tensor().shape(), v.clone()))
                .collect(),
        }
    }

    /// Restores a snapshot. Buffers are matched to parameters by name and
    /// must agree on shape.
    pub fn load_state(&mut self, state: &SgdState) -> Result<()> {
        let mut restored: Vec<Vec<f64>> = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let (_, shape, buffer) = state
                .velocity
                .iter()
                .find(|(name, _, _)| name == p.name())
                .ok_or_else(|| {
                    Error::LoadMismatch(format!(
                        "optimizer buffer for parameter '{}' not in record",
                        p.name()
                    ))
                })?;
            if *shape != p.tensor().shape() {
                return Err(Error::LoadMismatch(format!(
                    "optimizer buffer '{}' has shape {}, parameter has {}",
                    p.name(),
                    shape,
                    p.tensor().shape()
                )));
            }
            restored.push(buffer.clone());
        }
        if state.velocity.len() != self.params.len() {
            return Err(Error::LoadMismatch(format!(
                "record has {} optimizer buffers, optimizer has {} parameters",
                state.velocity.len(),
                self.params.len()
            )));
        }
        self.learning_rate = state.learning_rate;
        self.momentum = state.momentum;
        self.velocity = restored;
        Ok(())
    }
}
