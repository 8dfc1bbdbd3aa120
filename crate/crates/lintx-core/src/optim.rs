//! Adam with bias correction.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state: step counter plus first/second moment per parameter,
/// in the same order as the parameter list it was built for.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let m = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let v = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. `params` and `grads` must match the
    /// shapes this state was built with, in order.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "adam built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for k in 0..params.len() {
            if params[k].shape() != self.m[k].shape() || grads[k].shape() != self.m[k].shape() {
                return Err(CoreError::ShapeMismatch(format!(
                    "adam parameter {k}: state {:?}, param {:?}, grad {:?}",
                    self.m[k].shape(),
                    params[k].shape(),
                    grads[k].shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for k in 0..params.len() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params[k].data_mut();
            let g = grads[k].data();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
