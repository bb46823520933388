use serde::{Deserialize, Serialize};

use crate::numeric::Tensor;

/// `M` Monte-Carlo class-probability vectors for one input plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    /// `[M × K]`, one probability row per weight draw.
    pub samples: Tensor,
    /// `[K]`, column average of `samples`.
    pub mean: Tensor,
    pub m: usize,
    pub lambda_used: f64,
}

impl PredictiveDistribution {
    pub fn from_samples(samples: Tensor, lambda_used: f64) -> Self {
        let (m, k) = (samples.shape()[0], samples.shape()[1]);
        let mut mean = vec![0.0; k];
        for i in 0..m {
            for (acc, v) in mean.iter_mut().zip(samples.row(i)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        Self {
            samples,
            mean: Tensor::new(&[k], mean).expect("k > 0"),
            m,
            lambda_used,
        }
    }

    pub fn class_count(&self) -> usize {
        self.mean.numel()
    }

    pub fn argmax(&self) -> usize {
        argmax(self.mean.data())
    }

    pub fn confidence(&self) -> f64 {
        self.mean
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
