use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 2e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            clip_norm: 0.0,
            ..Self::default()
        }
    }
}

/// Stateful optimizer over a [`ParamStore`]. Frozen parameters are skipped.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the stored gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), NnError> {
        for p in store.iter_mut() {
            if !p.frozen && !p.gradient.is_finite() {
                return Err(NnError::NonFinite(p.name.clone()));
            }
        }
        let c = &self.config;
        let mut scale = 1.0;
        if c.clip_norm > 0.0 {
            let norm = store
                .iter()
                .filter(|(_, p)| !p.frozen)
                .flat_map(|(_, p)| p.gradient.data().iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > c.clip_norm {
                scale = c.clip_norm / norm;
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                p.gradient.fill(0.0);
                continue;
            }
            let grad = p.gradient.data();
            let mut value = std::mem::replace(&mut p.value, super::Tensor::zeros(&[1]));
            let w = value.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(grad) {
                        *w -= c.learning_rate * g * scale;
                    }
                }
                OptimizerKind::Momentum => {
                    let v = &mut self.first[i];
                    for ((w, g), v) in w.iter_mut().zip(grad).zip(v.iter_mut()) {
                        *v = c.momentum * *v + g * scale;
                        *w -= c.learning_rate * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    for (((w, g), m), v) in w.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g * scale;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        *w -= c.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    }
                }
            }
            p.value = value;
            p.gradient.fill(0.0);
        }
        Ok(())
    }
}
