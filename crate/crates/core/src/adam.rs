//! Adam with bias correction over flat parameter slices.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update of `params`; entries with `frozen[i] == true` keep both
    /// their value and their moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], frozen: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len(), "parameter length");
        assert_eq!(grads.len(), self.m.len(), "gradient length");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = AdamState::new(3, 0.05);
        let mut p = vec![1.0, 2.0, 3.0];
        s.step(&mut p, &[0.0; 3], None);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut s = AdamState::new(4, 0.05);
        let mut p = vec![1.0; 4];
        s.step(&mut p, &[0.3; 4], None);
        let expected = 1.0 - 0.05 * 0.3 / (0.3 + 1e-8);
        for v in p {
            assert!((v - expected).abs() < 1e-15);
            assert!((v - 0.95).abs() < 1e-8);
        }
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0; 3];
        let frozen = [false, true, false];
        for k in 0..100 {
            let g = [(k as f64).sin(), (k as f64).cos(), 0.5];
            s.step(&mut p, &g, Some(&frozen));
        }
        assert_eq!(p[1], 1.0);
        assert_eq!(s.m[1], 0.0);
        assert_ne!(p[0], 1.0);
    }
}
