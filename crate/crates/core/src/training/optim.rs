use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn default_betas() -> (f64, f64) {
    (0.9, 0.98)
}

fn default_eps() -> f64 {
    1e-8
}

fn default_weight_decay() -> f64 {
    0.01
}

/// Adam with decoupled weight decay, linear warmup and linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            warmup_steps: 100,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.peak_lr > 0.0
            && self.peak_lr.is_finite()
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate of update `step` (1-based) out of `total`: linear warmup
    /// to the peak, then linear decay that reaches zero one step past the end.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let w = self.warmup_steps;
        if step <= w {
            self.peak_lr * step as f64 / w as f64
        } else {
            let remaining = (total + 1).saturating_sub(step) as f64;
            let span = (total + 1).saturating_sub(w) as f64;
            self.peak_lr * (remaining / span).max(0.0)
        }
    }
}

/// Adam moments mirroring a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    config: OptimConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: usize,
}

impl OptimState {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| {
                    let (r, c) = store.get(id).shape();
                    Matrix::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update with learning rate `lr`. Buffers are skipped.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = lr * bc2.sqrt() / bc1;
        let decay = self.config.weight_decay * lr;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.role(id) == ParamRole::Buffer {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.first[id.index()].data_mut();
            let v = self.second[id.index()].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= decay * p[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + self.config.eps);
            }
        }
    }
}
