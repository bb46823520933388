//! Eager (tape-free) versions of the core operations, used for inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::kernels;
use crate::numeric::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Tanh,
    SoftmaxLastdim,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
            Activation::Tanh => 3,
            Activation::SoftmaxLastdim => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Some(match id {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Gelu,
            3 => Activation::Tanh,
            4 => Activation::SoftmaxLastdim,
            _ => return None,
        })
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => {
            Tensor::new(&[*m, *n], kernels::matmul(a.data(), b.data(), *m, *k, *n))
        }
        _ => Err(Error::dim("matmul", a.shape(), b.shape())),
    }
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Identity => x.data().to_vec(),
        Activation::Relu => x.data().iter().map(|&v| kernels::relu(v)).collect(),
        Activation::Gelu => x.data().iter().map(|&v| kernels::gelu(v)).collect(),
        Activation::Tanh => x.data().iter().map(|v| v.tanh()).collect(),
        Activation::SoftmaxLastdim => kernels::softmax_rows(x.data(), *x.shape().last().unwrap()),
    };
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Parameter(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let cols = *x.shape().last().unwrap();
    if gain.numel() != cols || bias.numel() != cols {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let (y, _, _) = kernels::layer_norm(x.data(), gain.data(), bias.data(), eps);
    Tensor::new(x.shape(), y)
}

pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [n, k] = logits.shape() else {
        return Err(Error::Shape(format!(
            "cross_entropy expects a matrix, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != *n {
        return Err(Error::dim("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= *k {
            return Err(Error::Index(format!(
                "label {l} out of range for {k} classes"
            )));
        }
        let row = logits.row(i);
        total += kernels::log_sum_exp(row) - row[l];
    }
    Ok(total / *n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_overflow_guard() {
        let u = activate(&Tensor::zeros(&[1, 4]), Activation::SoftmaxLastdim);
        assert_eq!(u.data(), &[0.25; 4]);
        let big = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let s = activate(&big, Activation::SoftmaxLastdim);
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(s.all_finite());
    }

    #[test]
    fn relu_clamps() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activate(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn layer_norm_fixed_rows() {
        let g = Tensor::filled(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let c = Tensor::filled(&[1, 3], 5.0);
        assert_eq!(layer_norm(&c, &g, &b, 1e-5).unwrap().data(), &[0.0; 3]);

        let g2 = Tensor::filled(&[2], 1.0);
        let b2 = Tensor::zeros(&[2]);
        let x = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &g2, &b2, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);
        assert!(layer_norm(&x, &g2, &b2, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let uniform = Tensor::zeros(&[3, 4]);
        assert!((cross_entropy(&uniform, &[0, 1, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = Tensor::new(&[1, 2], vec![100.0, -100.0]).unwrap();
        assert!(cross_entropy(&sure, &[0]).unwrap() < 1e-12);
        assert!(matches!(
            cross_entropy(&uniform, &[0, 1, 4]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn activation_ids_round_trip() {
        for a in [
            Activation::Identity,
            Activation::Relu,
            Activation::Gelu,
            Activation::Tanh,
            Activation::SoftmaxLastdim,
        ] {
            assert_eq!(Activation::from_id(a.id()), Some(a));
        }
    }
}
