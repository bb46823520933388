//! Principal-component feature reduction.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[k × d]`, orthonormal rows.
    pub components: Tensor,
    /// Per-component variance, non-increasing.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.rows()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| v / self.total_variance)
            .collect()
    }

    /// Maps projected rows back into feature space.
    pub fn inverse_transform(&self, z: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        let k = self.k();
        if z.row_len() != k {
            return Err(Error::dim(
                "pca_inverse_transform",
                z.shape(),
                self.components.shape(),
            ));
        }
        let mut out = Vec::with_capacity(z.rows() * d);
        for i in 0..z.rows() {
            let zr = z.row(i);
            for j in 0..d {
                let v: f64 = (0..k)
                    .map(|c| zr[c] * self.components.data()[c * d + j])
                    .sum();
                out.push(v + self.mean[j]);
            }
        }
        Tensor::new(&[z.rows(), d], out)
    }
}

/// Fits principal components on the rows of `x`, keeping the fewest
/// components whose cumulative explained-variance ratio reaches
/// `variance_threshold`.
pub fn pca_fit(x: &Tensor, variance_threshold: f64) -> Result<PcaModel> {
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(Error::Parameter(format!(
            "variance threshold {variance_threshold} not in (0, 1]"
        )));
    }
    let n = x.rows();
    let d = x.row_len();
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    if total_variance <= f64::EPSILON * d as f64 {
        return Err(Error::Degenerate("data has zero variance".into()));
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let variances: Vec<f64> = order
        .iter()
        .map(|&i| svd.singular_values[i].powi(2) / (n - 1) as f64)
        .collect();
    let mut k = variances.len();
    let mut cumulative = 0.0;
    for (i, v) in variances.iter().enumerate() {
        cumulative += v / total_variance;
        if cumulative >= variance_threshold - 1e-12 {
            k = i + 1;
            break;
        }
    }

    let mut components = Vec::with_capacity(k * d);
    for &i in &order[..k] {
        let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
        // Fix the sign so the largest-magnitude loading is positive.
        let pivot = row
            .iter()
            .cloned()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(row);
    }
    Ok(PcaModel {
        mean,
        components: Tensor::new(&[k, d], components)?,
        explained_variance: variances[..k].to_vec(),
        total_variance,
    })
}

/// `(x − mean) · componentsᵀ`.
pub fn pca_transform(model: &PcaModel, x: &Tensor) -> Result<Tensor> {
    let d = model.mean.len();
    if x.row_len() != d {
        return Err(Error::dim(
            "pca_transform",
            x.shape(),
            model.components.shape(),
        ));
    }
    let k = model.k();
    let c = model.components.data();
    let mut out = Vec::with_capacity(x.rows() * k);
    for i in 0..x.rows() {
        let r = x.row(i);
        for comp in 0..k {
            out.push(
                (0..d)
                    .map(|j| (r[j] - model.mean[j]) * c[comp * d + j])
                    .sum(),
            );
        }
    }
    Tensor::new(&[x.rows(), k], out)
}
