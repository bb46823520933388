//! One seeded active-learning run: split, seed set, and the cycle loop.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{count_not_confident, score_all, select_queries, Method};
use crate::bayes::{train, VariationalModel};
use crate::codec::{unseal, Reader, Writer};
use crate::data::{pca_fit, pca_transform, split, Dataset, SampleId, SplitSpec};
use crate::engine::config::ExperimentConfig;
use crate::engine::metrics::evaluate;
use crate::engine::oracle::{LabelRequest, Oracle};
use crate::engine::pool::PoolState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::Rng;

pub const RUN_MAGIC: &[u8; 4] = b"UALC";
pub const RUN_VERSION: u32 = 1;

// Stream tags for `Rng::derive(seed, [tag, cycle])`.
const TAG_SPLIT: u64 = 1;
const TAG_SEED_SET: u64 = 2;
const TAG_MODEL_INIT: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_SLICE: u64 = 5;
const TAG_SCORE: u64 = 6;
const TAG_EVAL: u64 = 7;
const INITIAL: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Scoring,
    AwaitingLabels,
    Retraining,
    Done,
    Failed,
}

/// Progress callbacks; every method defaults to a no-op.
pub trait Observer: Sync {
    fn phase(&self, _seed: u64, _cycle: usize, _phase: Phase) {}
    fn report(&self, _report: &CycleReport) {}
}

pub struct NoObserver;
impl Observer for NoObserver {}

/// Per-cycle metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub seed: u64,
    pub cycle_index: usize,
    pub method: Method,
    pub lambda: f64,
    pub tau_conf: f64,
    pub slice_size: usize,
    pub not_confident_count: usize,
    pub queried_ids: Vec<SampleId>,
    pub labeled_count: usize,
    pub pool_size: usize,
    pub labeled_fraction: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ece: f64,
    pub config_hash: String,
    pub input_hash: String,
    /// Excluded from serialized reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

/// Everything a run needs besides its mutable state.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub pool: Dataset,
    pub test: Dataset,
    pub config_hash: String,
    pub input_hash: String,
    positions: HashMap<SampleId, usize>,
}

impl RunContext {
    /// Splits `dataset` for `seed` and applies the optional PCA reduction
    /// (fitted on the pool only).
    pub fn new(
        config: &ExperimentConfig,
        dataset: &Dataset,
        seed: u64,
        input_hash: &str,
    ) -> Result<Self> {
        let spec = SplitSpec {
            test_fraction: config.split.test_fraction,
            seed: Rng::derive(seed, &[TAG_SPLIT]).next_u64(),
            stratified: config.split.stratified,
        };
        let (mut pool, mut test) = split(dataset, &spec)?;
        if let Some(threshold) = config.pca_variance {
            let n = pool.len();
            let flat = pool.features.clone().reshape(&[n, pool.feature_dim()])?;
            let pca = pca_fit(&flat, threshold)?;
            pool.features = pca_transform(&pca, &flat)?;
            let nt = test.len();
            let flat_t = test.features.clone().reshape(&[nt, test.feature_dim()])?;
            test.features = pca_transform(&pca, &flat_t)?;
        }
        let positions = pool
            .sample_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect();
        Ok(Self {
            config: config.clone(),
            seed,
            pool,
            test,
            config_hash: config.config_hash(),
            input_hash: input_hash.to_string(),
            positions,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.pool.features.shape()[1..].to_vec()
    }

    pub fn positions(&self, ids: &[SampleId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.positions
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Index(format!("sample {id} is not in the pool")))
            })
            .collect()
    }

    pub fn fresh_model(&self) -> Result<Model> {
        let init_seed = Rng::derive(self.seed, &[TAG_MODEL_INIT]).next_u64();
        self.config
            .model
            .build(&self.input_shape(), self.pool.class_count, init_seed)
    }

    /// Labeled training set using oracle labels from `state`.
    pub fn labeled_dataset(&self, state: &PoolState) -> Result<Dataset> {
        let ids: Vec<SampleId> = state.labeled.iter().copied().collect();
        let pos = self.positions(&ids)?;
        let features = self.pool.features.select_rows(&pos)?;
        let labels = ids.iter().map(|id| state.labels[id]).collect();
        Dataset::new(features, labels, self.pool.class_count, ids)
    }

    /// Trains from scratch (or from `warm` when warm-starting).
    fn fit(&self, state: &PoolState, warm: Option<&Model>, stream: u64) -> Result<Model> {
        let mut model = match (self.config.warm_start, warm) {
            (true, Some(m)) => m.clone(),
            _ => self.fresh_model()?,
        };
        let labeled = self.labeled_dataset(state)?;
        let mut rng = Rng::derive(self.seed, &[TAG_TRAIN, stream]);
        train(&mut model, &labeled, &self.config.train, &mut rng)?;
        Ok(model)
    }

    /// Stratified seed set of `initial_per_class` samples per class,
    /// labeled with ground truth, plus the model trained on it.
    pub fn initial(&self) -> Result<(PoolState, Model)> {
        let mut state = PoolState::new(self.pool.sample_ids.iter().copied());
        let mut rng = Rng::derive(self.seed, &[TAG_SEED_SET]);
        for class in 0..self.pool.class_count {
            let mut members: Vec<usize> = (0..self.pool.len())
                .filter(|&i| self.pool.labels[i] == class)
                .collect();
            rng.shuffle(&mut members);
            for &i in members.iter().take(self.config.initial_per_class) {
                state.assign(self.pool.sample_ids[i], class)?;
            }
        }
        if state.labeled.is_empty() {
            return Err(Error::EmptyInput(
                "pool has no samples for the seed set".into(),
            ));
        }
        let model = self.fit(&state, None, INITIAL)?;
        Ok((state, model))
    }

    /// One query → label → retrain → evaluate cycle. On any error the
    /// caller's `state` and `model` are untouched.
    pub fn run_cycle(
        &self,
        state: &PoolState,
        model: &Model,
        oracle: &mut dyn Oracle,
        observer: &dyn Observer,
    ) -> Result<(PoolState, Model, CycleReport)> {
        let started = Instant::now();
        let cfg = &self.config;
        let cycle = state.cycle_index;
        if state.unlabeled.is_empty() {
            return Err(Error::Contract("no unlabeled samples left".into()));
        }
        observer.phase(self.seed, cycle, Phase::Scoring);

        let mut candidates: Vec<SampleId> = state.unlabeled.iter().copied().collect();
        let mut slice_rng = Rng::derive(self.seed, &[TAG_SLICE, cycle as u64]);
        slice_rng.shuffle(&mut candidates);
        candidates.truncate(cfg.per_cycle_pool);
        candidates.sort_unstable();

        let x = self
            .pool
            .features
            .select_rows(&self.positions(&candidates)?)?;
        let mut score_rng = Rng::derive(self.seed, &[TAG_SCORE, cycle as u64]);
        let dists = model.predict_mc(&x, cfg.m_predict, cfg.lambda, &mut score_rng)?;
        let not_confident = count_not_confident(&dists, cfg.tau_conf)?;
        let scores = score_all(cfg.acquisition, &candidates, &dists, &mut score_rng)?;
        let batch = select_queries(&scores, cfg.budget, cycle);

        let mut next = state.clone();
        next.mark_pending(&batch.sample_ids)?;
        let labels = if batch.sample_ids.is_empty() {
            Vec::new()
        } else {
            oracle.label(&LabelRequest {
                seed: self.seed,
                cycle_index: cycle,
                method: cfg.acquisition,
                batch: &batch,
            })?
        };
        if labels.len() != batch.sample_ids.len() {
            return Err(Error::Oracle(format!(
                "oracle returned {} labels for {} queries",
                labels.len(),
                batch.sample_ids.len()
            )));
        }
        for (&id, &class) in batch.sample_ids.iter().zip(&labels) {
            if class >= self.pool.class_count {
                return Err(Error::Oracle(format!(
                    "label {class} for sample {id} is out of range"
                )));
            }
            next.assign(id, class)?;
        }

        observer.phase(self.seed, cycle, Phase::Retraining);
        let new_model = self.fit(&next, Some(model), cycle as u64)?;
        let mut eval_rng = Rng::derive(self.seed, &[TAG_EVAL, cycle as u64]);
        let metrics = evaluate(
            &new_model,
            &self.test,
            cfg.m_predict,
            cfg.lambda,
            cfg.ece_bins,
            &mut eval_rng,
        )?;
        next.cycle_index += 1;
        next.check()?;

        let pool_size = next.total();
        let report = CycleReport {
            seed: self.seed,
            cycle_index: cycle,
            method: cfg.acquisition,
            lambda: cfg.lambda,
            tau_conf: cfg.tau_conf,
            slice_size: candidates.len(),
            not_confident_count: not_confident,
            queried_ids: batch.sample_ids,
            labeled_count: next.labeled.len(),
            pool_size,
            labeled_fraction: next.labeled.len() as f64 / pool_size as f64,
            accuracy: metrics.accuracy,
            precision: metrics.precision,
            recall: metrics.recall,
            f1: metrics.f1,
            ece: metrics.ece,
            config_hash: self.config_hash.clone(),
            input_hash: self.input_hash.clone(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        observer.report(&report);
        Ok((next, new_model, report))
    }
}

/// A run in progress: context, pool state, current model and reports so far.
#[derive(Debug, Clone)]
pub struct Run {
    pub ctx: RunContext,
    pub state: PoolState,
    pub model: Model,
    pub reports: Vec<CycleReport>,
}

impl Run {
    pub fn start(
        config: &ExperimentConfig,
        dataset: &Dataset,
        seed: u64,
        input_hash: &str,
    ) -> Result<Self> {
        Self::from_context(RunContext::new(config, dataset, seed, input_hash)?)
    }

    /// Draws the seed set and trains the initial model for `ctx`.
    pub fn from_context(ctx: RunContext) -> Result<Self> {
        let (state, model) = ctx.initial()?;
        Ok(Self {
            ctx,
            state,
            model,
            reports: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.cycle_index >= self.ctx.config.cycles || self.state.unlabeled.is_empty()
    }

    /// Runs the next cycle; state is only replaced when it succeeds.
    pub fn step(
        &mut self,
        oracle: &mut dyn Oracle,
        observer: &dyn Observer,
    ) -> Result<&CycleReport> {
        let (state, model, report) =
            self.ctx
                .run_cycle(&self.state, &self.model, oracle, observer)?;
        self.state = state;
        self.model = model;
        self.reports.push(report);
        Ok(self.reports.last().unwrap())
    }

    pub fn run_to_end(&mut self, oracle: &mut dyn Oracle, observer: &dyn Observer) -> Result<()> {
        while !self.is_done() {
            self.step(oracle, observer)?;
        }
        observer.phase(self.ctx.seed, self.state.cycle_index, Phase::Done);
        Ok(())
    }

    /// Sealed container with pool state, model and reports.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut w = Writer::with_header(RUN_MAGIC, RUN_VERSION);
        w.u64(self.ctx.seed);
        w.str(&self.ctx.config_hash);
        w.str(&serde_json::to_string(&self.state).expect("pool state serializes"));
        w.bytes(&self.model.to_bytes());
        w.u64(self.reports.len() as u64);
        for r in &self.reports {
            w.str(&serde_json::to_string(r).expect("report serializes"));
            w.f64(r.wall_time_seconds);
        }
        w.finish_sealed()
    }

    /// Rebuilds a run from [`Run::checkpoint`] bytes; `config` and `dataset`
    /// must be the ones the run was started with.
    pub fn restore(
        config: &ExperimentConfig,
        dataset: &Dataset,
        input_hash: &str,
        bytes: &[u8],
    ) -> Result<Self> {
        let body = unseal(bytes)?;
        let mut r = Reader::with_header(body, RUN_MAGIC, RUN_VERSION)?;
        let seed = r.u64()?;
        let hash = r.str()?;
        if hash != config.config_hash() {
            return Err(Error::Integrity(
                "checkpoint was written for a different config".into(),
            ));
        }
        let state: PoolState = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Integrity(format!("pool state: {e}")))?;
        let model = Model::from_bytes(r.bytes()?)?;
        let count = r.len_prefix()?;
        let mut reports = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rep: CycleReport = serde_json::from_str(&r.str()?)
                .map_err(|e| Error::Integrity(format!("report: {e}")))?;
            rep.wall_time_seconds = r.f64()?;
            reports.push(rep);
        }
        r.expect_end()?;
        state.check().map_err(|e| Error::Integrity(e.to_string()))?;
        let ctx = RunContext::new(config, dataset, seed, input_hash)?;
        if state.total() != ctx.pool.len() {
            return Err(Error::Integrity(
                "checkpoint pool does not match the dataset split".into(),
            ));
        }
        Ok(Self {
            ctx,
            state,
            model,
            reports,
        })
    }
}
