//! Adaptive-moment optimizer with decoupled weight decay.

use alloc::vec::Vec;
#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    pub fn new(len: usize, params: AdamParams) -> Self {
        AdamW { params, m: alloc::vec![0.0; len], v: alloc::vec![0.0; len], step: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        let AdamParams { beta1, beta2, eps, weight_decay } = self.params;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut theta = vec![0.3, -1.2, 4.0];
        let before = theta.clone();
        let mut opt = AdamW::new(3, AdamParams::default());
        for _ in 0..10 {
            opt.step(&mut theta, &[0.0; 3], 0.1);
        }
        assert_eq!(theta, before);
    }

    #[test]
    fn constant_gradient_moves_by_learning_rate() {
        let lr = 1e-3;
        let mut theta = vec![0.0, 0.0];
        let mut opt = AdamW::new(2, AdamParams::default());
        let mut prev = theta.clone();
        for _ in 0..500 {
            opt.step(&mut theta, &[2.5, -0.01], lr);
            for (a, b) in theta.iter().zip(&prev) {
                assert!(((a - b).abs() - lr).abs() < 1e-6 * lr);
            }
            prev = theta.clone();
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut theta = vec![1.0, -2.0];
        let mut opt = AdamW::new(2, AdamParams { weight_decay: 0.1, ..AdamParams::default() });
        let mut norm = 5f64.sqrt();
        for _ in 0..20 {
            opt.step(&mut theta, &[0.0, 0.0], 0.05);
            let n = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n < norm);
            norm = n;
        }
    }
}
