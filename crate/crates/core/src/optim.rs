//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam state for a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

/// L2 norm over every present gradient.
pub fn global_norm(grads: &[Option<&[f64]>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Parameters whose gradient is `None` are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&[f64]>], lr: f64) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let mut opt = Adam::new(&p, AdamConfig { clip_norm: None, ..AdamConfig::default() });
        let g = [0.5, -3.0];
        let norm = opt.step(&mut p, &[Some(&g)], 0.1).unwrap();
        assert!((norm - (0.25f64 + 9.0).sqrt()).abs() < 1e-12);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn frozen_tensors_untouched() {
        let mut p = vec![Tensor::full(&[3], 2.0)];
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[None], 1.0).unwrap();
        assert_eq!(p[0].data(), &[2.0; 3]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![5.0]).unwrap()];
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g = [2.0 * p[0].data()[0]];
            opt.step(&mut p, &[Some(&g)], 0.05).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn rejects_nan_gradient() {
        let mut p = vec![Tensor::full(&[1], 0.0)];
        let mut opt = Adam::new(&p, AdamConfig::default());
        assert!(opt.step(&mut p, &[Some(&[f64::NAN])], 0.1).is_err());
    }
}
