//! The cyclic active-learning protocol: pool bookkeeping, oracles,
//! retraining, evaluation metrics and multi-seed experiments.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod oracle;
pub mod pool;
pub mod run;

pub use config::{DatasetSpec, ExperimentConfig, LoadedDataset, SplitConfig};
pub use experiment::{
    aggregate, run_experiment, write_outputs, AggregateRow, ExperimentResult, SeedRun, Spread,
};
pub use metrics::{classification_metrics, confusion_matrix, ece, evaluate, Metrics};
pub use oracle::{FailingOracle, LabelRequest, Oracle, SimulatedOracle};
pub use pool::PoolState;
pub use run::{CycleReport, NoObserver, Observer, Phase, Run, RunContext};
