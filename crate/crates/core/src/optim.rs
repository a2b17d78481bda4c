//! Adam with bias correction and classic (coupled) L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("optimizer.learning_rate must be positive"));
        }
        for (name, b) in [
            ("optimizer.beta1", self.beta1),
            ("optimizer.beta2", self.beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(config_err(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err("optimizer.epsilon must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err("optimizer.weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(num_params: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            config,
        })
    }

    /// One in-place Adam step.
    pub fn step(&mut self, params: &mut ModelParams, grad: &[f64]) -> Result<()> {
        let n = params.len();
        if grad.len() != n || self.first_moment.len() != n {
            return Err(shape_err(format!(
                "adam: {} params, {} grads, {} moments",
                n,
                grad.len(),
                self.first_moment.len()
            )));
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let w = params.weights_mut();
        for i in 0..n {
            let g = grad[i] + weight_decay * w[i];
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            w[i] -= learning_rate * (m / bc1) / ((v / bc2).sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn adam_update(
    state: &OptimizerState,
    params: &ModelParams,
    grad: &[f64],
) -> Result<(OptimizerState, ModelParams)> {
    let mut state = state.clone();
    let mut params = params.clone();
    state.step(&mut params, grad)?;
    Ok((state, params))
}
