use serde::{Deserialize, Serialize};

use crate::numeric::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter and zeroes its gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            debug_assert_eq!(m.len(), p.numel());
            let grad = p.grad().map(<[f64]>::to_vec);
            if let Some(g) = grad {
                let data = p.data_mut();
                for i in 0..data.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                }
            } else {
                for i in 0..m.len() {
                    m[i] *= self.beta1;
                    v[i] *= self.beta2;
                }
                let data = p.data_mut();
                for i in 0..data.len() {
                    data[i] -=
                        self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                }
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut w = Tensor::scalar(0.0).with_grad();
        w.accumulate_grad(&[1.0]);
        let mut opt = OptimizerState::new(0.1);
        opt.step(&mut [&mut w]);
        assert!((w.item() + 0.1).abs() < 1e-6, "{}", w.item());
        assert!(w.grad().is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::filled(&[3], 2.0).with_grad();
        w.accumulate_grad(&[0.0; 3]);
        let mut opt = OptimizerState::default();
        opt.step(&mut [&mut w]);
        assert_eq!(w.data(), &[2.0; 3]);
    }

    #[test]
    fn minimises_shifted_quadratic() {
        let mut w = Tensor::scalar(0.0).with_grad();
        let mut opt = OptimizerState::new(0.1);
        for _ in 0..50 {
            let g = 2.0 * (w.item() - 3.0);
            w.accumulate_grad(&[g]);
            opt.step(&mut [&mut w]);
        }
        assert!((w.item() - 3.0).abs() < 0.5, "{}", w.item());
    }
}
