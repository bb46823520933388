//! Minibatch stochastic variational inference with Adam.

use serde::{Deserialize, Serialize};

use crate::bayes::classifier::{BayesianClassifier, ElboBreakdown};
use crate::bayes::predictive::PredictiveDistribution;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{OptimizerState, Rng, Tape, Tensor, Var};

/// Anything trainable by [`train`]: a set of leaf tensors and a stochastic
/// negative-ELBO graph over them.
pub trait VariationalModel {
    /// Registers every trainable tensor on `tape`, in [`VariationalModel::params_mut`] order.
    fn bind_params(&self, tape: &mut Tape) -> Vec<Var>;

    #[allow(clippy::too_many_arguments)]
    fn elbo_graph(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        x: &Tensor,
        labels: &[usize],
        m_train: usize,
        kl_weight: f64,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(Var, ElboBreakdown)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn predict_mc(
        &self,
        x: &Tensor,
        m: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Vec<PredictiveDistribution>>;

    fn class_count(&self) -> usize;

    /// Hook run after every epoch (empirical-Bayes prior updates).
    fn end_of_epoch(&mut self) -> Result<()> {
        Ok(())
    }
}

impl VariationalModel for BayesianClassifier {
    fn bind_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.bind(tape).0
    }

    fn elbo_graph(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        x: &Tensor,
        labels: &[usize],
        m_train: usize,
        kl_weight: f64,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<(Var, ElboBreakdown)> {
        let bound = self.bind_leaves(leaves);
        let n = x.shape()[0];
        let flat = x.clone().reshape(&[n, x.numel() / n])?;
        let xv = tape.constant(flat);
        self.elbo_on_tape(tape, &bound, xv, labels, m_train, kl_weight, lambda, rng)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut()
    }

    fn predict_mc(
        &self,
        x: &Tensor,
        m: usize,
        lambda: f64,
        rng: &mut Rng,
    ) -> Result<Vec<PredictiveDistribution>> {
        BayesianClassifier::predict_mc(self, x, m, lambda, rng)
    }

    fn class_count(&self) -> usize {
        self.class_count
    }

    fn end_of_epoch(&mut self) -> Result<()> {
        if self.prior.learns_sigmas() {
            self.empirical_bayes_update(1, 1.0)?;
        }
        Ok(())
    }
}

/// How the KL term is weighted against the mean minibatch cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KlWeightRule {
    /// `1 / N_labeled`: the per-sample negative ELBO.
    PerSample,
    /// `1 / num_batches`.
    PerBatch,
    Fixed {
        value: f64,
    },
}

impl Default for KlWeightRule {
    fn default() -> Self {
        KlWeightRule::PerSample
    }
}

impl KlWeightRule {
    pub fn weight(&self, n_labeled: usize, num_batches: usize) -> f64 {
        match *self {
            KlWeightRule::PerSample => 1.0 / n_labeled as f64,
            KlWeightRule::PerBatch => 1.0 / num_batches as f64,
            KlWeightRule::Fixed { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub m_train: usize,
    pub learning_rate: f64,
    pub kl_weight_rule: KlWeightRule,
    pub lambda_train: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            m_train: 2,
            learning_rate: 0.01,
            kl_weight_rule: KlWeightRule::PerSample,
            lambda_train: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.m_train == 0 {
            return Err(Error::Config("m_train must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda_train > 0.0 && self.lambda_train.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_train must be positive, got {}",
                self.lambda_train
            )));
        }
        if let KlWeightRule::Fixed { value } = self.kl_weight_rule {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::Config(format!(
                    "fixed kl weight must be >= 0, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-epoch averages of the minibatch [`ElboBreakdown`]s.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<ElboBreakdown>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&ElboBreakdown> {
        self.epochs.last()
    }
}

/// Trains `model` on every row of `labeled`.
pub fn train<M: VariationalModel>(
    model: &mut M,
    labeled: &Dataset,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainingTrace> {
    config.validate()?;
    if labeled.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let n = labeled.len();
    let batch = config.batch_size.min(n);
    let num_batches = n.div_ceil(batch);
    let kl_weight = config.kl_weight_rule.weight(n, num_batches);
    let mut opt = OptimizerState::new(config.learning_rate);
    let mut trace = TrainingTrace::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut sums = [0.0; 3];
        for chunk in order.chunks(batch) {
            let x = labeled.features.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labeled.labels[i]).collect();
            let mut tape = Tape::new();
            let leaves = model.bind_params(&mut tape);
            let (loss, b) = model.elbo_graph(
                &mut tape,
                &leaves,
                &x,
                &y,
                config.m_train,
                kl_weight,
                config.lambda_train,
                rng,
            )?;
            let grads = tape.backward(loss)?;
            let mut params = model.params_mut();
            for (leaf, p) in leaves.iter().zip(params.iter_mut()) {
                grads.accumulate_into(*leaf, p);
            }
            opt.step(&mut params);
            sums[0] += b.nll;
            sums[1] += b.kl;
            sums[2] += b.total;
        }
        let nb = num_batches as f64;
        trace.epochs.push(ElboBreakdown {
            nll: sums[0] / nb,
            kl: sums[1] / nb,
            kl_weight,
            total: sums[2] / nb,
        });
        model.end_of_epoch()?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::classifier::ClassifierSpec;
    use crate::data::gen_toy1;
    use crate::numeric::Activation;

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut c =
            BayesianClassifier::init(&ClassifierSpec::mlp(vec![2, 4, 2], Activation::Relu), 0)
                .unwrap();
        let before = c.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let trace = train(&mut c, &gen_toy1(10, 0), &cfg, &mut Rng::seed_from(0)).unwrap();
        assert!(trace.epochs.is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn kl_weight_rules() {
        assert_eq!(KlWeightRule::PerSample.weight(200, 4), 0.005);
        assert_eq!(KlWeightRule::PerBatch.weight(200, 4), 0.25);
        assert_eq!(KlWeightRule::Fixed { value: 0.3 }.weight(200, 4), 0.3);
    }
}
