//! SGD with Nesterov momentum, coupled weight decay and cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `0.5 · base_lr · (1 + cos(π · step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::contract(format!(
            "cosine schedule step {step} of {total_steps}"
        )));
    }
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T: Real = f32> {
    pub config: SgdConfig,
    pub velocity: Vec<Vec<T>>,
    pub total_steps: usize,
    pub step: usize,
}

impl<T: Real> SgdState<T> {
    /// Zero velocity for parameters of the given lengths.
    pub fn new(config: SgdConfig, param_lens: impl IntoIterator<Item = usize>, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::contract("optimiser needs at least one step"));
        }
        if config.base_lr < 0.0 || config.weight_decay < 0.0 || !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::contract(format!("invalid optimiser settings {config:?}")));
        }
        Ok(SgdState {
            config,
            velocity: param_lens.into_iter().map(|n| vec![T::zero(); n]).collect(),
            total_steps,
            step: 0,
        })
    }

    /// Learning rate the next [`sgd_step`] will use.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.config.base_lr)
    }
}

/// One update of every parameter from its gradient:
/// `g = grad + wd·w; v = μ·v + g; w −= lr·(g + μ·v)`.
///
/// Returns the learning rate that was applied.
pub fn sgd_step<'a, T: Real>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[&[T]],
    state: &mut SgdState<T>,
) -> Result<f64> {
    let lr = state.current_lr()?;
    let (lr_t, mu, wd) = (
        T::from_f64(lr),
        T::from_f64(state.config.momentum),
        T::from_f64(state.config.weight_decay),
    );
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::size(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::size(format!(
                "parameter of length {} with gradient {} and velocity {}",
                p.len(),
                g.len(),
                v.len()
            )));
        }
    }
    for ((p, g), v) in params.into_iter().zip(grads).zip(&mut state.velocity) {
        for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            let g = gi + wd * *w;
            *vi = mu * *vi + g;
            *w -= lr_t * (g + mu * *vi);
        }
    }
    state.step += 1;
    Ok(lr)
}
