//! Bayesian classifiers trained by stochastic variational inference.

pub mod classifier;
pub mod layer;
pub mod predictive;
pub mod prior;
pub mod train;

pub use classifier::{BayesianClassifier, ClassifierSpec, ElboBreakdown};
pub use layer::{GaussianParam, PosteriorKind, VariationalLayer};
pub use predictive::PredictiveDistribution;
pub use prior::PriorSpec;
pub use train::{train, KlWeightRule, TrainConfig, TrainingTrace, VariationalModel};
