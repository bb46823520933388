//! Gaussian variational parameters for one dense layer.
//!
//! Each parameter block stores a mean `mu` and an unconstrained `rho` with
//! `σ = softplus(rho)`. The optional low-rank factor `U` (`[count × r]`)
//! enriches the diagonal family to `N(μ, diag(σ²) + UUᵀ)`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numeric::kernels::{softplus, softplus_inv};
use crate::numeric::{Rng, Tape, Tensor, Var};

/// Upper bound on the rank of the low-rank enrichment.
pub const MAX_LOW_RANK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PosteriorKind {
    MeanField,
    LowRank { rank: usize },
}

impl Default for PosteriorKind {
    fn default() -> Self {
        PosteriorKind::MeanField
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParam {
    pub mu: Tensor,
    pub rho: Tensor,
    pub factor: Option<Tensor>,
}

/// Tape handles for one [`GaussianParam`].
#[derive(Debug, Clone, Copy)]
pub struct BoundParam {
    pub mu: Var,
    pub rho: Var,
    pub factor: Option<Var>,
}

impl GaussianParam {
    pub fn new(mu: Tensor, sigma: f64, rank: Option<usize>) -> Self {
        let rho = Tensor::filled(mu.shape(), softplus_inv(sigma)).with_grad();
        let count = mu.numel();
        let factor = rank
            .map(|r| r.min(MAX_LOW_RANK).min(count).max(1))
            .map(|r| Tensor::zeros(&[count, r]).with_grad());
        Self {
            mu: mu.with_grad(),
            rho,
            factor,
        }
    }

    pub fn count(&self) -> usize {
        self.mu.numel()
    }

    pub fn rank(&self) -> usize {
        self.factor.as_ref().map_or(0, |f| f.shape()[1])
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.data().iter().map(|&r| softplus(r)).collect()
    }

    /// Draws `μ + λ·(σ⊙ε + U·ε′)`; ε is drawn before ε′.
    pub fn sample(&self, rng: &mut Rng, lambda: f64) -> Tensor {
        let mut out = self.mu.data().to_vec();
        for ((o, &r), e) in out
            .iter_mut()
            .zip(self.rho.data())
            .zip(rng.normals(self.count()))
        {
            *o += lambda * softplus(r) * e;
        }
        if let Some(u) = &self.factor {
            let r = u.shape()[1];
            let e2 = rng.normals(r);
            for (i, o) in out.iter_mut().enumerate() {
                let row = &u.data()[i * r..(i + 1) * r];
                *o += lambda * row.iter().zip(&e2).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Tensor::new(self.mu.shape(), out).expect("same shape")
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParam {
        BoundParam {
            mu: tape.leaf(&self.mu),
            rho: tape.leaf(&self.rho),
            factor: self.factor.as_ref().map(|f| tape.leaf(f)),
        }
    }

    /// Reparameterised draw recorded on `tape`, consuming noise in the same
    /// order as [`GaussianParam::sample`].
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        b: &BoundParam,
        rng: &mut Rng,
        lambda: f64,
    ) -> Result<Var> {
        let shape = self.mu.shape().to_vec();
        let sigma = tape.softplus(b.rho);
        let eps = tape.constant(Tensor::new(&shape, rng.normals(self.count()))?);
        let mut dev = tape.mul(sigma, eps)?;
        if let Some(u) = b.factor {
            let r = self.rank();
            let e2 = tape.constant(Tensor::new(&[r, 1], rng.normals(r))?);
            let low = tape.matmul(u, e2)?;
            let low = tape.reshape(low, &shape)?;
            dev = tape.add(dev, low)?;
        }
        let dev = if lambda == 1.0 {
            dev
        } else {
            tape.scale(dev, lambda)
        };
        tape.add(b.mu, dev)
    }

    /// Closed-form `KL(q ‖ N(0, σₚ²I))` as a tape scalar.
    ///
    /// With a low-rank factor the covariance is `D + UUᵀ`; its log
    /// determinant is `Σ log σᵢ² + log det(I + UᵀD⁻¹U)`.
    pub fn kl_on_tape(&self, tape: &mut Tape, b: &BoundParam, prior_sigma: f64) -> Result<Var> {
        let p = self.count() as f64;
        let sigma = tape.softplus(b.rho);
        let log_sigma = tape.ln(sigma);
        let var = tape.square(sigma);
        let mu2 = tape.square(b.mu);
        let second_moment = tape.add(var, mu2)?;
        let quad = tape.scale(second_moment, 1.0 / (2.0 * prior_sigma * prior_sigma));
        let per = tape.sub(quad, log_sigma)?;
        let mut kl = tape.sum(per);
        kl = tape.add_scalar(kl, p * (prior_sigma.ln() - 0.5));
        if let Some(u) = b.factor {
            let r = self.rank();
            let u2 = tape.square(u);
            let tr = tape.sum(u2);
            let tr = tape.scale(tr, 1.0 / (2.0 * prior_sigma * prior_sigma));
            kl = tape.add(kl, tr)?;
            let flat_sigma = tape.reshape(sigma, &[self.count()])?;
            let inv_sigma = tape.recip(flat_sigma);
            let scaled = tape.mul_col(u, inv_sigma)?;
            let scaled_t = tape.transpose(scaled)?;
            let gram = tape.matmul(scaled_t, scaled)?;
            let eye = tape.constant(Tensor::identity(r));
            let m = tape.add(gram, eye)?;
            let logdet = tape.logdet_spd(m)?;
            let half = tape.scale(logdet, -0.5);
            kl = tape.add(kl, half)?;
        }
        Ok(kl)
    }

    /// Eager KL; agrees with [`GaussianParam::kl_on_tape`].
    pub fn kl(&self, prior_sigma: f64) -> f64 {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let kl = self
            .kl_on_tape(&mut tape, &b, prior_sigma)
            .expect("consistent shapes");
        tape.value(kl).item()
    }

    /// `(P, S)` with `S = tr Σ + μᵀμ`; the KL depends on the prior scale only
    /// through `P·log σₚ + S / (2σₚ²)`.
    pub fn prior_sufficient_stats(&self) -> (f64, f64) {
        let s: f64 = self
            .sigma()
            .iter()
            .zip(self.mu.data())
            .map(|(s, m)| s * s + m * m)
            .sum::<f64>()
            + self
                .factor
                .as_ref()
                .map_or(0.0, |u| u.data().iter().map(|v| v * v).sum());
        (self.count() as f64, s)
    }
}

/// Dense layer `z = a·W + b` with Gaussian weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalLayer {
    pub weight: GaussianParam,
    pub bias: GaussianParam,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: BoundParam,
    pub bias: BoundParam,
}

impl VariationalLayer {
    /// Means drawn from `N(0, 1/fan_in)`, σ fixed at `init_sigma`.
    pub fn init(
        fan_in: usize,
        fan_out: usize,
        init_sigma: f64,
        posterior: PosteriorKind,
        rng: &mut Rng,
    ) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        let rank = match posterior {
            PosteriorKind::MeanField => None,
            PosteriorKind::LowRank { rank } => Some(rank),
        };
        let w = Tensor::new(
            &[fan_in, fan_out],
            rng.normals(fan_in * fan_out)
                .into_iter()
                .map(|e| e * std)
                .collect(),
        )
        .expect("shape");
        let b = Tensor::new(
            &[fan_out],
            rng.normals(fan_out).into_iter().map(|e| e * std).collect(),
        )
        .expect("shape");
        Self {
            weight: GaussianParam::new(w, init_sigma, rank),
            bias: GaussianParam::new(b, init_sigma, rank),
            fan_in,
            fan_out,
        }
    }

    pub fn parameter_count(&self) -> (usize, usize) {
        (self.weight.count(), self.bias.count())
    }

    pub fn sample_weights(&self, rng: &mut Rng, lambda: f64) -> (Tensor, Tensor) {
        let w = self.weight.sample(rng, lambda);
        let b = self.bias.sample(rng, lambda);
        (w, b)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLayer {
        BoundLayer {
            weight: self.weight.bind(tape),
            bias: self.bias.bind(tape),
        }
    }

    pub fn kl(&self, prior_sigma: f64) -> f64 {
        self.weight.kl(prior_sigma) + self.bias.kl(prior_sigma)
    }

    pub fn kl_on_tape(&self, tape: &mut Tape, b: &BoundLayer, prior_sigma: f64) -> Result<Var> {
        let kw = self.weight.kl_on_tape(tape, &b.weight, prior_sigma)?;
        let kb = self.bias.kl_on_tape(tape, &b.bias, prior_sigma)?;
        tape.add(kw, kb)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight.mu, &self.weight.rho];
        v.extend(self.weight.factor.as_ref());
        v.extend([&self.bias.mu, &self.bias.rho]);
        v.extend(self.bias.factor.as_ref());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight.mu, &mut self.weight.rho];
        v.extend(self.weight.factor.as_mut());
        v.extend([&mut self.bias.mu, &mut self.bias.rho]);
        v.extend(self.bias.factor.as_mut());
        v
    }

    /// Rebuilds handles from leaves registered in [`VariationalLayer::tensors`] order.
    pub fn bind_from(&self, vars: &mut impl Iterator<Item = Var>) -> BoundLayer {
        let mut next = || vars.next().expect("enough leaves");
        let wmu = next();
        let wrho = next();
        let wf = self.weight.factor.as_ref().map(|_| next());
        let bmu = next();
        let brho = next();
        let bf = self.bias.factor.as_ref().map(|_| next());
        BoundLayer {
            weight: BoundParam {
                mu: wmu,
                rho: wrho,
                factor: wf,
            },
            bias: BoundParam {
                mu: bmu,
                rho: brho,
                factor: bf,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mu: f64, sigma: f64) -> GaussianParam {
        GaussianParam::new(Tensor::scalar(mu), sigma, None)
    }

    #[test]
    fn kl_zero_when_posterior_equals_prior() {
        assert!(single(0.0, 1.3).kl(1.3).abs() < 1e-12);
    }

    #[test]
    fn kl_half_mu_squared() {
        assert!((single(1.0, 1.0).kl(1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_limit_returns_mean() {
        let mut p = single(0.7, 1.0);
        p.rho = Tensor::scalar(-800.0);
        let w = p.sample(&mut Rng::seed_from(1), 1.0);
        assert_eq!(w.item(), 0.7);
    }

    #[test]
    fn eager_and_tape_draws_agree() {
        let mut rng = Rng::seed_from(3);
        let layer = VariationalLayer::init(3, 2, 0.4, PosteriorKind::LowRank { rank: 2 }, &mut rng);
        let mut layer = layer;
        for v in layer.weight.factor.as_mut().unwrap().data_mut() {
            *v = 0.1;
        }
        let eager = layer.weight.sample(&mut Rng::seed_from(9), 0.3);
        let mut tape = Tape::new();
        let b = layer.bind(&mut tape);
        let v = layer
            .weight
            .sample_on_tape(&mut tape, &b.weight, &mut Rng::seed_from(9), 0.3)
            .unwrap();
        for (a, b) in eager.data().iter().zip(tape.value(v).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn low_rank_rank_is_capped() {
        let p = GaussianParam::new(Tensor::zeros(&[40]), 0.1, Some(64));
        assert_eq!(p.rank(), MAX_LOW_RANK);
        let q = GaussianParam::new(Tensor::zeros(&[3]), 0.1, Some(8));
        assert_eq!(q.rank(), 3);
    }

    #[test]
    fn zero_factor_kl_matches_mean_field() {
        let mut rng = Rng::seed_from(5);
        let mf = VariationalLayer::init(4, 3, 0.2, PosteriorKind::MeanField, &mut rng);
        let mut lr = mf.clone();
        lr.weight.factor = Some(Tensor::zeros(&[12, 4]));
        lr.bias.factor = Some(Tensor::zeros(&[3, 3]));
        assert!((mf.kl(1.0) - lr.kl(1.0)).abs() < 1e-10);
    }
}
