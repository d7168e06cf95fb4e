use super::Tensor;
use crate::error::{CstError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment buffers for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        OptimizerState {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Rejects the whole step, leaving state
    /// and parameters untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(CstError::dims("adam", &[params.len()], &[grads.len()]));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(CstError::dims("adam", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(CstError::Numeric { op: "adam" });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(CstError::Config("cosine_lr: total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(CstError::Config(format!(
            "cosine_lr: step {step} beyond total {total_steps}"
        )));
    }
    let t = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0)
}
