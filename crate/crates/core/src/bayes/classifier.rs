//! Bayesian feed-forward classifier: a chain of [`VariationalLayer`]s with
//! per-layer activations and a Gaussian prior.

use serde::{Deserialize, Serialize};

use crate::bayes::layer::{BoundLayer, PosteriorKind, VariationalLayer};
use crate::bayes::predictive::PredictiveDistribution;
use crate::bayes::prior::PriorSpec;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numeric::kernels::{self, softplus_inv};
use crate::numeric::ops::{self, Activation};
use crate::numeric::{Rng, Tape, Tensor, Var};

/// Lower and upper clamp for learned per-layer prior scales.
pub const PRIOR_SIGMA_RANGE: (f64, f64) = (1e-3, 10.0);

/// Initial posterior σ as a fraction of the prior σ.
pub const INIT_SIGMA_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    /// Input width, hidden widths and class count, e.g. `[2, 16, 2]`.
    pub layer_dims: Vec<usize>,
    /// One activation per layer; the last one must be `identity` or
    /// `softmax_lastdim` (logits are normalised at prediction time).
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub prior: PriorSpec,
    #[serde(default)]
    pub posterior: PosteriorKind,
}

impl ClassifierSpec {
    /// Hidden layers share `hidden_activation`; the output layer is linear.
    pub fn mlp(layer_dims: Vec<usize>, hidden_activation: Activation) -> Self {
        let layers = layer_dims.len().saturating_sub(1);
        let mut activations = vec![hidden_activation; layers];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        Self {
            layer_dims,
            activations,
            prior: PriorSpec::default(),
            posterior: PosteriorKind::MeanField,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("classifier needs at least one layer".into()));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "layer dims must be positive: {:?}",
                self.layer_dims
            )));
        }
        let layers = self.layer_dims.len() - 1;
        if self.activations.len() != layers {
            return Err(Error::Config(format!(
                "{} activations for {layers} layers",
                self.activations.len()
            )));
        }
        if !matches!(
            self.activations[layers - 1],
            Activation::Identity | Activation::SoftmaxLastdim
        ) {
            return Err(Error::Config(
                "output activation must be identity or softmax_lastdim".into(),
            ));
        }
        if self.activations[..layers - 1].contains(&Activation::SoftmaxLastdim) {
            return Err(Error::Config(
                "softmax_lastdim is only valid on the output layer".into(),
            ));
        }
        if *self.layer_dims.last().unwrap() < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if let PosteriorKind::LowRank { rank } = self.posterior {
            if rank == 0 {
                return Err(Error::Config("low-rank posterior needs rank >= 1".into()));
            }
        }
        self.prior.validate(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub kl_weight: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianClassifier {
    pub layers: Vec<VariationalLayer>,
    pub activations: Vec<Activation>,
    pub prior: PriorSpec,
    pub posterior: PosteriorKind,
    pub class_count: usize,
}

impl BayesianClassifier {
    pub fn init(spec: &ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::seed_from(seed);
        let layers = spec
            .layer_dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let sigma = INIT_SIGMA_FRACTION * spec.prior.sigma_for(l);
                VariationalLayer::init(w[0], w[1], sigma, spec.posterior, &mut rng)
            })
            .collect();
        Ok(Self {
            layers,
            activations: spec.activations.clone(),
            prior: spec.prior.clone(),
            posterior: spec.posterior,
            class_count: *spec.layer_dims.last().unwrap(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.fan_out))
            .collect()
    }

    pub fn kl(&self) -> f64 {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, layer)| layer.kl(self.prior.sigma_for(l)))
            .sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }

    /// Registers every variational tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> (Vec<Var>, Vec<BoundLayer>) {
        let leaves: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        let bound = self.bind_leaves(&leaves);
        (leaves, bound)
    }

    pub fn bind_leaves(&self, leaves: &[Var]) -> Vec<BoundLayer> {
        let mut it = leaves.iter().copied();
        self.layers.iter().map(|l| l.bind_from(&mut it)).collect()
    }

    fn flatten_input(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        let width = x.numel() / n.max(1);
        if width != self.input_dim() {
            return Err(Error::dim(
                "classifier input",
                x.shape(),
                &[n, self.input_dim()],
            ));
        }
        x.clone().reshape(&[n, width])
    }

    /// One weight draw of the full network recorded on `tape`.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[BoundLayer],
        x: Var,
        rng: &mut Rng,
        lambda: f64,
    ) -> Result<Var> {
        let mut h = x;
        for (l, (layer, b)) in self.layers.iter().zip(bound).enumerate() {
            let w = layer.weight.sample_on_tape(tape, &b.weight, rng, lambda)?;
            let bias = layer.bias.sample_on_tape(tape, &b.bias, rng, lambda)?;
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, bias)?;
            h = match self.activations[l] {
                Activation::Identity | Activation::SoftmaxLastdim => z,
                Activation::Relu => tape.relu(z),
                Activation::Gelu => tape.gelu(z),
                Activation::Tanh => tape.tanh(z),
            };
        }
        Ok(h)
    }

    pub fn kl_on_tape(&self, tape: &mut Tape, bound: &[BoundLayer]) -> Result<Var> {
        let mut total = None;
        for (l, (layer, b)) in self.layers.iter().zip(bound).enumerate() {
            let k = layer.kl_on_tape(tape, b, self.prior.sigma_for(l))?;
            total = Some(match total {
                None => k,
                Some(t) => tape.add(t, k)?,
            });
        }
        Ok(total.expect("at least one layer"))
    }

    /// Negative ELBO on a batch of (already embedded) features `x`.
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[BoundLayer],
        x: Var,
        labels: &[usize],
        m_train: usize,
        kl_weight: f64,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        if labels.is_empty() {
            return Err(Error::Contract("elbo_loss on an empty batch".into()));
        }
        if m_train == 0 {
            return Err(Error::Contract("m_train must be >= 1".into()));
        }
        let mut nll = None;
        for _ in 0..m_train {
            let logits = self.logits_on_tape(tape, bound, x, rng, lambda)?;
            let ce = tape.cross_entropy(logits, labels)?;
            nll = Some(match nll {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });
        }
        let nll = tape.scale(nll.unwrap(), 1.0 / m_train as f64);
        let kl = self.kl_on_tape(tape, bound)?;
        let weighted = tape.scale(kl, kl_weight);
        let total = tape.add(nll, weighted)?;
        let nll_v = tape.value(nll).item();
        let kl_v = tape.value(kl).item();
        Ok((
            total,
            ElboBreakdown {
                nll: nll_v,
                kl: kl_v,
                kl_weight,
                total: nll_v + kl_weight * kl_v,
            },
        ))
    }

    /// Evaluates the negative ELBO on `(x, labels)` without keeping gradients.
    pub fn elbo_loss(
        &self,
        x: &Tensor,
        labels: &[usize],
        m_train: usize,
        kl_weight: f64,
        rng: &mut Rng,
    ) -> Result<ElboBreakdown> {
        let x = self.flatten_input(x)?;
        let mut tape = Tape::new();
        let (_, bound) = self.bind(&mut tape);
        let xv = tape.constant(x);
        let (_, breakdown) =
            self.elbo_on_tape(&mut tape, &bound, xv, labels, m_train, kl_weight, 1.0, rng)?;
        Ok(breakdown)
    }

    /// Forward pass with explicit weights `(W_l, b_l)`; returns logits.
    pub fn forward_with(&self, x: &Tensor, weights: &[(Tensor, Tensor)]) -> Result<Tensor> {
        let mut h = self.flatten_input(x)?;
        for (l, (w, b)) in weights.iter().enumerate() {
            let mut z = ops::matmul(&h, w)?;
            let cols = b.numel();
            for row in z.data_mut().chunks_mut(cols) {
                row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
            }
            h = match self.activations[l] {
                Activation::SoftmaxLastdim => z,
                a => ops::activate(&z, a),
            };
        }
        Ok(h)
    }

    /// Forward pass at the posterior means.
    pub fn forward_mean(&self, x: &Tensor) -> Result<Tensor> {
        let weights: Vec<_> = self
            .layers
            .iter()
            .map(|l| (l.weight.mu.clone(), l.bias.mu.clone()))
            .collect();
        self.forward_with(x, &weights)
    }

    pub fn sample_all(&self, rng: &mut Rng, lambda: f64) -> Vec<(Tensor, Tensor)> {
        self.layers
            .iter()
            .map(|l| l.sample_weights(rng, lambda))
            .collect()
    }

    /// Monte-Carlo predictive distribution for every row of `x`.
    ///
    /// Each of the `m` weight draws is shared across the batch.
    pub fn predict_mc(
        &self,
        x: &Tensor,
        m: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Vec<PredictiveDistribution>> {
        if m == 0 {
            return Err(Error::Contract("predict_mc needs M >= 1".into()));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let n = x.shape()[0];
        let k = self.class_count;
        let mut per_draw = Vec::with_capacity(m);
        for _ in 0..m {
            let weights = self.sample_all(rng, lambda);
            let logits = self.forward_with(x, &weights)?;
            per_draw.push(kernels::softmax_rows(logits.data(), k));
        }
        Ok((0..n)
            .map(|i| {
                let rows: Vec<f64> = per_draw
                    .iter()
                    .flat_map(|p| p[i * k..(i + 1) * k].iter().copied())
                    .collect();
                PredictiveDistribution::from_samples(
                    Tensor::new(&[m, k], rows).expect("shape"),
                    lambda,
                )
            })
            .collect())
    }

    /// Gradient ascent on the ELBO with respect to each layer's prior σ.
    ///
    /// Only the KL term depends on σ_l; each step is normalised by the layer's
    /// parameter count and backtracked so the layer KL never increases.
    pub fn empirical_bayes_update(&mut self, steps: usize, step_size: f64) -> Result<PriorSpec> {
        let PriorSpec::PerLayer {
            layer_sigmas,
            learn_layer_sigmas,
        } = &mut self.prior
        else {
            return Err(Error::Config(
                "empirical Bayes needs a per_layer prior".into(),
            ));
        };
        if !*learn_layer_sigmas {
            return Err(Error::Config(
                "per_layer prior does not have learn_layer_sigmas set".into(),
            ));
        }
        let (lo, hi) = PRIOR_SIGMA_RANGE;
        for (layer, sigma) in self.layers.iter().zip(layer_sigmas.iter_mut()) {
            let (mut n, mut s) = layer.weight.prior_sufficient_stats();
            let (nb, sb) = layer.bias.prior_sufficient_stats();
            n += nb;
            s += sb;
            let kl_part = |sp: f64| n * sp.ln() + s / (2.0 * sp * sp);
            for _ in 0..steps {
                let grad = s / sigma.powi(3) - n / *sigma;
                let mut eta = step_size;
                loop {
                    let cand = (*sigma + eta * grad / n).clamp(lo, hi);
                    if kl_part(cand) <= kl_part(*sigma) || eta < 1e-12 {
                        if kl_part(cand) <= kl_part(*sigma) {
                            *sigma = cand;
                        }
                        break;
                    }
                    eta *= 0.5;
                }
            }
        }
        Ok(self.prior.clone())
    }

    pub fn write_to(&self, w: &mut Writer) {
        w.u32(self.layers.len() as u32);
        for d in self.layer_dims() {
            w.u64(d as u64);
        }
        for a in &self.activations {
            w.u8(a.id());
        }
        match &self.prior {
            PriorSpec::Isotropic { sigma } => {
                w.u8(0);
                w.f64(*sigma);
            }
            PriorSpec::PerLayer {
                layer_sigmas,
                learn_layer_sigmas,
            } => {
                w.u8(1);
                w.u8(*learn_layer_sigmas as u8);
                w.f64s(layer_sigmas);
            }
        }
        match self.posterior {
            PosteriorKind::MeanField => w.u32(0),
            PosteriorKind::LowRank { rank } => w.u32(rank as u32),
        }
        for layer in &self.layers {
            for p in [&layer.weight, &layer.bias] {
                w.f64s(p.mu.data());
                w.f64s(p.rho.data());
                match &p.factor {
                    None => w.u32(0),
                    Some(u) => {
                        w.u32(u.shape()[1] as u32);
                        w.f64s(u.data());
                    }
                }
            }
        }
    }

    pub fn read_from(r: &mut Reader) -> Result<Self> {
        let layers = r.u32()? as usize;
        if layers == 0 || layers > 1024 {
            return Err(Error::Integrity(format!(
                "implausible layer count {layers}"
            )));
        }
        let dims = (0..=layers)
            .map(|_| Ok(r.u64()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let activations = (0..layers)
            .map(|_| {
                let id = r.u8()?;
                Activation::from_id(id)
                    .ok_or_else(|| Error::Integrity(format!("unknown activation id {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let prior = match r.u8()? {
            0 => PriorSpec::Isotropic { sigma: r.f64()? },
            1 => {
                let learn = r.u8()? != 0;
                PriorSpec::PerLayer {
                    learn_layer_sigmas: learn,
                    layer_sigmas: r.f64s()?,
                }
            }
            t => return Err(Error::Integrity(format!("unknown prior tag {t}"))),
        };
        let posterior = match r.u32()? {
            0 => PosteriorKind::MeanField,
            rank => PosteriorKind::LowRank {
                rank: rank as usize,
            },
        };
        let spec = ClassifierSpec {
            layer_dims: dims.clone(),
            activations: activations.clone(),
            prior: prior.clone(),
            posterior,
        };
        spec.validate()
            .map_err(|e| Error::Integrity(format!("invalid classifier header: {e}")))?;
        let mut read_param = |shape: &[usize]| -> Result<crate::bayes::layer::GaussianParam> {
            let count: usize = shape.iter().product();
            let mu = Tensor::new(shape, r.f64s()?).map_err(|e| Error::Integrity(e.to_string()))?;
            let rho = Tensor::new(shape, r.f64s()?).map_err(|e| Error::Integrity(e.to_string()))?;
            let rank = r.u32()? as usize;
            let factor = if rank == 0 {
                None
            } else {
                Some(
                    Tensor::new(&[count, rank], r.f64s()?)
                        .map_err(|e| Error::Integrity(e.to_string()))?
                        .with_grad(),
                )
            };
            Ok(crate::bayes::layer::GaussianParam {
                mu: mu.with_grad(),
                rho: rho.with_grad(),
                factor,
            })
        };
        let mut out = Vec::with_capacity(layers);
        for w in dims.windows(2) {
            let weight = read_param(&[w[0], w[1]])?;
            let bias = read_param(&[w[1]])?;
            out.push(VariationalLayer {
                weight,
                bias,
                fan_in: w[0],
                fan_out: w[1],
            });
        }
        Ok(Self {
            layers: out,
            activations,
            prior,
            posterior,
            class_count: *dims.last().unwrap(),
        })
    }

    /// Sets every posterior σ to `sigma` (used by limit tests and tooling).
    pub fn set_sigma(&mut self, sigma: f64) {
        let rho = if sigma == 0.0 {
            -1e3
        } else {
            softplus_inv(sigma)
        };
        for layer in &mut self.layers {
            for p in [&mut layer.weight, &mut layer.bias] {
                p.rho.data_mut().iter_mut().for_each(|r| *r = rho);
            }
        }
    }
}
