use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuro::{NetGrads, NetParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, decay: 0.99, epsilon: 1e-5 }
    }
}

/// RMSProp with a per-parameter running mean of squared gradients:
/// `v <- rho v + (1 - rho) g^2`, `w <- w - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    config: RmsPropConfig,
    accumulator: Vec<f64>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, param_count: usize) -> Self {
        Self { config, accumulator: vec![0.0; param_count] }
    }

    pub fn config(&self) -> &RmsPropConfig {
        &self.config
    }

    pub fn accumulator(&self) -> &[f64] {
        &self.accumulator
    }

    pub fn set_accumulator(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.accumulator.len() || values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Shape("accumulator must match and be nonnegative".into()));
        }
        self.accumulator = values;
        Ok(())
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &NetGrads) -> Result<()> {
        if params.param_count() != self.accumulator.len()
            || grads.weights.len() != params.weights().len()
            || grads
                .weights
                .iter()
                .zip(params.weights())
                .any(|(g, w)| g.dim() != w.dim())
        {
            return Err(Error::Shape("gradient shapes do not match parameters".into()));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {bad}")));
        }
        let RmsPropConfig { learning_rate, decay, epsilon } = self.config;
        for ((w, g), v) in params
            .iter_mut_with_generation()
            .zip(grads.iter())
            .zip(self.accumulator.iter_mut())
        {
            *v = decay * *v + (1.0 - decay) * g * g;
            *w -= learning_rate * g / (v.sqrt() + epsilon);
        }
        Ok(())
    }
}
