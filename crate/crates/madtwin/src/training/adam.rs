//! Adam optimizer state and global-norm gradient clipping over flat
//! parameter vectors.

use crate::error::{Error, Result};

/// Moment decay rates and the denominator guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config: AdamConfig::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of `theta` in place.
    pub fn update(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state holds {} entries, got {} parameters and {} gradients",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// Rescales `grad` so its L2 norm does not exceed `max_norm` (one global
/// rescale, no per-tensor clipping). Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g = vec![3.0, 4.0];
        let pre = clip_global_norm(&mut g, 0.5);
        assert_eq!(pre, 5.0);
        assert_abs_diff_eq!(g[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.4, epsilon = 1e-15);
        let post = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_abs_diff_eq!(post, 0.5, epsilon = 1e-12);

        let mut small = vec![0.1, 0.2];
        let pre = clip_global_norm(&mut small, 0.5);
        assert!(pre < 0.5);
        assert_eq!(small, vec![0.1, 0.2]);

        let mut zero = vec![0.0, 0.0];
        assert_eq!(clip_global_norm(&mut zero, 0.5), 0.0);
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let mut opt = AdamState::new(2);
        let mut theta = vec![1.0, -2.0];
        let grad = vec![0.5, -0.25];
        let lr = 1e-3;
        opt.update(&mut theta, &grad, lr).unwrap();
        // After one step m_hat = g and v_hat = g^2, so the move is
        // lr * g / (|g| + eps).
        for (i, &g) in grad.iter().enumerate() {
            let expect = [1.0, -2.0][i] - lr * g / (g.abs() + 1e-8);
            assert_abs_diff_eq!(theta[i], expect, epsilon = 1e-15);
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = AdamState::new(3);
        let mut theta = vec![0.5, -1.5, 2.0];
        let before = theta.clone();
        opt.update(&mut theta, &[0.0; 3], 1e-2).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut opt = AdamState::new(1);
        let mut theta = vec![-5.0];
        for _ in 0..4000 {
            let g = 2.0 * (theta[0] - 3.0);
            opt.update(&mut theta, &[g], 5e-2).unwrap();
        }
        assert!((theta[0] - 3.0).abs() < 1e-3, "theta = {}", theta[0]);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut opt = AdamState::new(2);
        let mut theta = vec![0.0; 3];
        assert!(opt.update(&mut theta, &[0.0; 3], 1e-3).is_err());
        let mut theta = vec![0.0; 2];
        assert!(opt.update(&mut theta, &[0.0; 3], 1e-3).is_err());
    }
}
