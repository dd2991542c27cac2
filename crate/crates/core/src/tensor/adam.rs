use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam optimizer state: first/second moments per parameter and a step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_parts(config: AdamConfig, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, step: u64) -> Self {
        Self { config, m, v, step }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment buffers, one per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one bias-corrected update from the gradients stored on
    /// `params`. Every differentiable parameter must carry a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Invalid {
                op: "adam_step",
                msg: format!(
                    "state for {} params, store has {}",
                    self.m.len(),
                    params.len()
                ),
            });
        }
        for id in params.ids() {
            let t = params.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(TensorError::MissingGrad(params.name(id).to_string()));
            }
            if t.numel() != self.m[id.0].len() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: t.shape().to_vec(),
                    rhs: vec![self.m[id.0].len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
