use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::nn::Stack;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            min_learning_rate: 1e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Cosine-annealed learning rate at `progress ∈ [0, 1]`.
    pub fn learning_rate_at(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.min_learning_rate
            + 0.5 * (self.learning_rate - self.min_learning_rate) * (1.0 + (PI * p).cos())
    }
}

/// Adam with coupled L2 weight decay (added to the gradient) on decaying
/// parameters. Moment buffers are keyed by parameter order in the stack.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients currently stored in `stack`.
    /// Returns the learning rate used.
    pub fn step(&mut self, stack: &mut Stack, progress: f64) -> f64 {
        let lr = self.config.learning_rate_at(progress);
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);

        let params = stack.params();
        if self.moments.is_empty() {
            self.moments =
                params.iter().map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()])).collect();
        }
        assert_eq!(self.moments.len(), params.len(), "optimizer bound to a different stack");

        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            if p.frozen {
                continue;
            }
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let grads = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = f64::from(grads[i]) + decay * f64::from(*w);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = lr * (m[i] / bias1) / ((v[i] / bias2).sqrt() + c.eps);
                *w = (f64::from(*w) - update) as f32;
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotone() {
        let c = AdamConfig::default();
        assert!((c.learning_rate_at(0.0) - 1e-3).abs() < 1e-15);
        assert!((c.learning_rate_at(1.0) - 1e-5).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let lr = c.learning_rate_at(f64::from(i) / 100.0);
            assert!(lr <= prev && lr >= c.min_learning_rate - 1e-18);
            prev = lr;
        }
    }
}
