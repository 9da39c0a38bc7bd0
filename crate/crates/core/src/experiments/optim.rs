use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};
use crate::vit::ParamVisitor;

/// Adam with decoupled weight decay, linear warmup and cosine decay to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 50,
        }
    }
}

impl AdamConfig {
    /// Learning rate at `step` (0-based) of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Optimizer state: first and second moments per parameter tensor in
/// visiting order.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Real> Adam<T> {
    pub fn new<P: ParamVisitor<T>>(config: AdamConfig, params: &P) -> Self {
        let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
        Self {
            config,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update with learning rate `lr`. `trainable` filters parameters by path.
    pub fn step<P: ParamVisitor<T>>(
        &mut self,
        params: &mut P,
        grads: &P,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let lr_t = T::lit(lr);
        let eps = T::lit(c.eps);
        let decay = T::lit(lr * c.weight_decay);
        let grads: Vec<&Tensor<T>> = grads.named().into_iter().map(|(_, g)| g).collect();
        for (i, (name, p)) in params.named_mut().into_iter().enumerate() {
            if !trainable(&name) {
                continue;
            }
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            // Decay only matrices, not gains, biases or embeddings.
            let decays = p.shape().len() == 2 && name != "posemb" && name != "cls";
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                if decays {
                    *w -= decay * *w;
                }
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let c = AdamConfig::default();
        assert!((c.lr_at(0, 1000) - c.lr / 50.0).abs() < 1e-15);
        assert!((c.lr_at(49, 1000) - c.lr).abs() < 1e-15);
        assert!((c.lr_at(50, 1000) - c.lr).abs() < 1e-15);
        assert!(c.lr_at(999, 1000) < 1e-5 * c.lr + 1e-8);
        let mut prev = f64::INFINITY;
        for s in 50..1000 {
            let lr = c.lr_at(s, 1000);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
