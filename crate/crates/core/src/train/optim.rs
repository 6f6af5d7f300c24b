use serde::{Deserialize, Serialize};

use super::backward::Gradients;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        let ok = cfg.lr >= 0.0
            && cfg.lr.is_finite()
            && (0.0..1.0).contains(&cfg.beta1)
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.eps > 0.0;
        if !ok {
            return Err(Error::config(format!("invalid optimizer settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let params = model.float_params_mut()?;
        if self.m.is_empty() {
            for g in grads.layers.iter().flatten() {
                self.m.push(vec![0.0; g.kernel.len()]);
                self.m.push(vec![0.0; g.bias.len()]);
            }
            self.v = self.m.clone();
        }
        self.step = self.step.saturating_add(1);
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        let mut slot = 0;
        for (p, g) in params.into_iter().zip(&grads.layers) {
            let (Some((kernel, bias)), Some(g)) = (p, g) else { continue };
            for (w, gw) in [(kernel, &g.kernel), (bias, &g.bias)] {
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                for i in 0..w.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gw[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gw[i] * gw[i];
                    w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                slot += 1;
            }
        }
        Ok(())
    }
}
