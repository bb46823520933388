use std::collections::HashMap;

use crate::acquisition::{Method, QueryBatch};
use crate::data::{Dataset, SampleId};
use crate::error::{Error, Result};

/// A batch of queries handed to the label source.
#[derive(Debug, Clone)]
pub struct LabelRequest<'a> {
    pub seed: u64,
    pub cycle_index: usize,
    pub method: Method,
    pub batch: &'a QueryBatch,
}

/// Label source. `label` blocks until every query in the batch is answered
/// and returns one class per `batch.sample_ids` entry.
pub trait Oracle {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>>;
}

/// Answers with the ground-truth labels of a dataset.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    truth: HashMap<SampleId, usize>,
}

impl SimulatedOracle {
    pub fn new(dataset: &Dataset) -> Self {
        Self {
            truth: dataset
                .sample_ids
                .iter()
                .copied()
                .zip(dataset.labels.iter().copied())
                .collect(),
        }
    }
}

impl Oracle for SimulatedOracle {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>> {
        request
            .batch
            .sample_ids
            .iter()
            .map(|id| {
                self.truth
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Oracle(format!("no ground truth for sample {id}")))
            })
            .collect()
    }
}

/// Wraps another oracle and fails on the listed cycles.
#[derive(Debug, Clone)]
pub struct FailingOracle<O> {
    pub inner: O,
    pub fail_cycles: Vec<usize>,
}

impl<O: Oracle> Oracle for FailingOracle<O> {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>> {
        if self.fail_cycles.contains(&request.cycle_index) {
            return Err(Error::Oracle(format!(
                "injected failure at cycle {}",
                request.cycle_index
            )));
        }
        self.inner.label(request)
    }
}
