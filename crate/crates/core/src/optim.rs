//! Heavy-ball SGD over staged parameters.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::Staged;
use crate::params::ParamSet;
use crate::tensor::Tape;

/// SGD with classical momentum: v ← momentum·v − lr·g; p ← p + v.
/// Velocity buffers key off parameter names and start at zero.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocities: IndexMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} is invalid")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum {momentum} outside [0,1)"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocities: IndexMap::new(),
        })
    }

    /// Apply one update from the gradients on `tape` to every staged entry,
    /// then clear the tape's gradients so a stale tape cannot be re-applied.
    pub fn step(&mut self, params: &mut ParamSet, staged: &Staged, tape: &mut Tape) -> Result<()> {
        for (name, var) in staged.iter() {
            let grad = tape.grad(var).ok_or_else(|| {
                Error::contract("sgd_step", format!("missing gradient for {name}"))
            })?;
            let entry = params.get_mut(name)?;
            let velocity = self
                .velocities
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if velocity.len() != grad.len() {
                return Err(Error::contract(
                    "sgd_step",
                    format!("velocity length changed for {name}"),
                ));
            }
            let w = entry.tensor.data_mut();
            for k in 0..grad.len() {
                velocity[k] = self.momentum * velocity[k] - self.lr * grad[k];
                w[k] += velocity[k];
            }
        }
        tape.clear_grads();
        Ok(())
    }
}
