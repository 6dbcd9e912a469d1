use serde::{Deserialize, Serialize};

use super::{MeanFieldPosterior, Result, ViError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr0: f64,
    /// Learning rate at step `t` is `lr0 / (1 + decay * t)`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    updates: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, n: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            updates: 0,
        }
    }

    pub fn learning_rate(&self, step_index: u64) -> f64 {
        self.config.lr0 / (1.0 + self.config.decay * step_index as f64)
    }

    /// One update. Coordinates with `trainable[k] == false` are left alone,
    /// moments included. A non-finite gradient is rejected before anything
    /// changes.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &[f64],
        trainable: Option<&[bool]>,
        step_index: u64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(ViError::Dimension {
                what: "optimizer state",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ViError::NonFinite {
                term: format!("gradient coordinate {k}"),
            });
        }
        let c = &self.config;
        let lr = self.learning_rate(step_index);
        self.updates += 1;
        let bc1 = 1.0 - c.beta1.powi(self.updates);
        let bc2 = 1.0 - c.beta2.powi(self.updates);
        for k in 0..params.len() {
            if trainable.is_some_and(|t| !t[k]) {
                continue;
            }
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * grad[k];
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
            let m_hat = self.m[k] / bc1;
            let v_hat = self.v[k] / bc2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// Adam step on all variational parameters of `q`.
pub fn svi_step(
    q: &mut MeanFieldPosterior,
    adam: &mut Adam,
    grad: &[f64],
    trainable: Option<&[bool]>,
    step_index: u64,
) -> Result<()> {
    let mut flat = q.flatten();
    adam.step(&mut flat, grad, trainable, step_index)?;
    q.assign_flat(&flat);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vi::NoiseFactor;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut adam = Adam::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 0.5];
        for t in 0..10 {
            adam.step(&mut p, &[0.0; 3], None, t).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn learning_rate_schedule() {
        let adam = Adam::new(AdamConfig::default(), 1);
        assert_eq!(adam.learning_rate(0), 1e-3);
        assert_abs_diff_eq!(adam.learning_rate(10_000), 5e-4, epsilon = 1e-18);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig::default(), 1);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0], None, 0).unwrap();
        assert_abs_diff_eq!(p[0], -1e-3, epsilon = 1e-10);
    }

    #[test]
    fn non_finite_gradient_leaves_state_unchanged() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, 2.0];
        adam.step(&mut p, &[0.5, -0.5], None, 0).unwrap();
        let (before_p, before_adam) = (p.clone(), adam.clone());
        assert!(adam.step(&mut p, &[f64::NAN, 1.0], None, 1).is_err());
        assert!(adam.step(&mut p, &[1.0, f64::INFINITY], None, 1).is_err());
        assert_eq!(p, before_p);
        assert_eq!(adam, before_adam);
    }

    #[test]
    fn frozen_coordinates_do_not_move() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, 2.0];
        adam.step(&mut p, &[1.0, 1.0], Some(&[true, false]), 0).unwrap();
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn svi_step_updates_every_variational_parameter() {
        let mut q = MeanFieldPosterior {
            mu: vec![0.0],
            log_sigma: vec![0.0],
            noise: NoiseFactor { mu: 0.0, log_sigma: 0.0 },
        };
        let mut adam = Adam::new(AdamConfig::default(), 4);
        svi_step(&mut q, &mut adam, &[1.0, -1.0, 1.0, -1.0], None, 0).unwrap();
        assert!(q.mu[0] < 0.0 && q.log_sigma[0] > 0.0);
        assert!(q.noise.mu < 0.0 && q.noise.log_sigma > 0.0);
    }
}
