//! Adam optimizer with decoupled weight decay.
//!
//! Per step, for each parameter: the decay shrink `theta *= 1 - lr * wd`
//! is applied first (it never touches the moment estimates), then the
//! bias-corrected Adam update runs on the accumulated gradient, then the
//! gradient is cleared.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};

use super::ParamModel;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step_count: u64,
    slots: HashMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> AdamState {
        AdamState {
            config,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter of `model` from its
    /// accumulated gradients, then zeroes the gradients. Fails on any
    /// non-finite gradient entry (the model is left partially updated;
    /// training is expected to abort).
    pub fn step(&mut self, model: &mut dyn ParamModel) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let cfg = &self.config;
        let bias1 = 1.0 - cfg.beta1.powi(t as i32);
        let bias2 = 1.0 - cfg.beta2.powi(t as i32);

        let mut failure: Option<Error> = None;
        let mut visited = 0usize;
        let slots = &mut self.slots;
        model.visit_params(&mut |p| {
            visited += 1;
            if failure.is_some() {
                return;
            }
            if let Some(pos) = p.grad.iter().position(|g| !g.is_finite()) {
                failure = Some(Error::NonFiniteGradient {
                    param: p.name.clone(),
                    index: pos,
                });
                return;
            }
            let slot = slots.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Array2::zeros(p.value.raw_dim()),
                v: Array2::zeros(p.value.raw_dim()),
            });

            if cfg.weight_decay != 0.0 {
                p.value *= 1.0 - cfg.learning_rate * cfg.weight_decay;
            }

            slot.m *= cfg.beta1;
            slot.m.scaled_add(1.0 - cfg.beta1, &p.grad);
            slot.v *= cfg.beta2;
            ndarray::Zip::from(&mut slot.v).and(&p.grad).for_each(|v, &g| {
                *v += (1.0 - cfg.beta2) * g * g;
            });

            ndarray::Zip::from(&mut p.value)
                .and(&slot.m)
                .and(&slot.v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                });
            p.grad.fill(0.0);
        });

        if let Some(e) = failure {
            return Err(e);
        }
        if self.slots.len() != visited {
            return Err(Error::Training(format!(
                "parameter names are not unique: {} parameters share {} names",
                visited,
                self.slots.len()
            )));
        }
        Ok(())
    }
}
