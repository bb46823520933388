//! Annotation sessions: one engine run on a worker thread whose oracle
//! blocks until a human has labeled every queried sample.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use serde::Serialize;

use crate::acquisition::Method;
use crate::data::SampleId;
use crate::engine::{
    CycleReport, ExperimentConfig, LabelRequest, Observer, Oracle, Phase, Run, RunContext,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Labeled,
}

/// One queried sample waiting for (or holding) a human label.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub sample_id: SampleId,
    pub cycle_index: usize,
    pub uncertainty: f64,
    pub method: Method,
    pub class_names: Vec<String>,
    pub status: TaskStatus,
    pub label: Option<usize>,
}

/// Task ids are derived from the cycle and sample so a restored session
/// reproduces the same ids.
pub fn task_id(cycle: usize, sample: SampleId) -> String {
    format!("c{cycle}-s{sample}")
}

/// Outcome of a label submission that did not succeed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SubmitError {
    UnknownTask,
    AlreadyLabeled,
    ClassOutOfRange { class_count: usize },
}

#[derive(Debug)]
struct State {
    phase: Phase,
    cycle_index: usize,
    tasks: BTreeMap<String, AnnotationTask>,
    /// Task ids of the cycle currently awaiting labels, in query order.
    current: Vec<String>,
    reports: Vec<CycleReport>,
    error: Option<String>,
    shutdown: bool,
}

#[derive(Debug)]
struct Shared {
    state: Mutex<State>,
    changed: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Point-in-time view of a session.
#[derive(Debug, Clone, Serialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub seed: u64,
    pub phase: Phase,
    pub cycle_index: usize,
    pub cycles: usize,
    pub open_count: usize,
    pub labeled_count: usize,
    pub latest_report: Option<CycleReport>,
    pub reports: Vec<CycleReport>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub config: ExperimentConfig,
    /// Split and feature context, used for rendering and label validation.
    pub ctx: RunContext,
    shared: Arc<Shared>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

struct HumanOracle {
    shared: Arc<Shared>,
    class_names: Vec<String>,
}

impl Oracle for HumanOracle {
    fn label(&mut self, request: &LabelRequest) -> Result<Vec<usize>> {
        let mut st = self.shared.lock();
        st.current.clear();
        for (&sample, score) in request.batch.sample_ids.iter().zip(&request.batch.scores) {
            let id = task_id(request.cycle_index, sample);
            st.tasks.insert(
                id.clone(),
                AnnotationTask {
                    task_id: id.clone(),
                    sample_id: sample,
                    cycle_index: request.cycle_index,
                    uncertainty: *score,
                    method: request.method,
                    class_names: self.class_names.clone(),
                    status: TaskStatus::Open,
                    label: None,
                },
            );
            st.current.push(id);
        }
        st.phase = Phase::AwaitingLabels;
        st.cycle_index = request.cycle_index;
        self.shared.changed.notify_all();
        loop {
            if st.shutdown {
                return Err(Error::Oracle(
                    "session shut down while awaiting labels".into(),
                ));
            }
            let labels: Option<Vec<usize>> =
                st.current.iter().map(|id| st.tasks[id].label).collect();
            if let Some(labels) = labels {
                return Ok(labels);
            }
            st = self
                .shared
                .changed
                .wait(st)
                .unwrap_or_else(|p| p.into_inner());
        }
    }
}

struct SessionObserver(Arc<Shared>);

impl Observer for SessionObserver {
    fn phase(&self, _seed: u64, cycle: usize, phase: Phase) {
        let mut st = self.0.lock();
        st.phase = phase;
        st.cycle_index = cycle;
        self.0.changed.notify_all();
    }

    fn report(&self, report: &CycleReport) {
        self.0.lock().reports.push(report.clone());
    }
}

/// How the worker obtains its run.
enum Start {
    Fresh(RunContext),
    Restored(Box<Run>),
}

impl Session {
    /// Validates `config` (exactly one seed), splits the dataset and starts
    /// the engine on a worker thread. On shutdown the worker writes its
    /// checkpoint to `checkpoint` when given.
    pub fn start(
        id: String,
        config: ExperimentConfig,
        base: &Path,
        checkpoint: Option<PathBuf>,
    ) -> Result<Arc<Self>> {
        let seed = single_seed(&config)?;
        let loaded = config.dataset.load(base)?;
        let ctx = RunContext::new(&config, &loaded.dataset, seed, &loaded.input_hash)?;
        Ok(Self::launch(
            id,
            config,
            ctx.clone(),
            Start::Fresh(ctx),
            Vec::new(),
            checkpoint,
        ))
    }

    /// Resumes a session from checkpoint bytes written by a previous worker.
    pub fn restore(
        id: String,
        config: ExperimentConfig,
        base: &Path,
        bytes: &[u8],
        checkpoint: Option<PathBuf>,
    ) -> Result<Arc<Self>> {
        single_seed(&config)?;
        let loaded = config.dataset.load(base)?;
        let run = Run::restore(&config, &loaded.dataset, &loaded.input_hash, bytes)?;
        let reports = run.reports.clone();
        Ok(Self::launch(
            id,
            config,
            run.ctx.clone(),
            Start::Restored(Box::new(run)),
            reports,
            checkpoint,
        ))
    }

    fn launch(
        id: String,
        config: ExperimentConfig,
        ctx: RunContext,
        start: Start,
        reports: Vec<CycleReport>,
        checkpoint: Option<PathBuf>,
    ) -> Arc<Self> {
        let cycle_index = reports.len();
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                phase: Phase::Scoring,
                cycle_index,
                tasks: BTreeMap::new(),
                current: Vec::new(),
                reports,
                error: None,
                shutdown: false,
            }),
            changed: Condvar::new(),
        });
        let session = Arc::new(Self {
            id,
            config,
            ctx: ctx.clone(),
            shared: shared.clone(),
            worker: Mutex::new(None),
        });
        let handle = std::thread::spawn(move || {
            work(shared, ctx.pool.class_names.clone(), start, checkpoint)
        });
        *session.worker.lock().unwrap_or_else(|p| p.into_inner()) = Some(handle);
        session
    }

    pub fn seed(&self) -> u64 {
        self.ctx.seed
    }

    pub fn class_count(&self) -> usize {
        self.ctx.pool.class_count
    }

    pub fn status(&self) -> SessionStatus {
        self.status_locked(&self.shared.lock())
    }

    /// Up to `limit` open tasks, highest uncertainty first (ties by sample id).
    pub fn open_tasks(&self, limit: usize) -> Vec<AnnotationTask> {
        let st = self.shared.lock();
        let mut open: Vec<AnnotationTask> = st
            .current
            .iter()
            .map(|id| &st.tasks[id])
            .filter(|t| t.status == TaskStatus::Open)
            .cloned()
            .collect();
        open.sort_by(|a, b| {
            b.uncertainty
                .total_cmp(&a.uncertainty)
                .then(a.sample_id.cmp(&b.sample_id))
        });
        open.truncate(limit);
        open
    }

    pub fn task(&self, task_id: &str) -> Option<AnnotationTask> {
        self.shared.lock().tasks.get(task_id).cloned()
    }

    /// Records a label; the engine resumes once the cycle's last open task
    /// is labeled.
    pub fn submit(
        &self,
        task_id: &str,
        class: usize,
    ) -> std::result::Result<AnnotationTask, SubmitError> {
        let mut st = self.shared.lock();
        let class_count = self.class_count();
        let task = st.tasks.get_mut(task_id).ok_or(SubmitError::UnknownTask)?;
        if task.status == TaskStatus::Labeled {
            return Err(SubmitError::AlreadyLabeled);
        }
        if class >= class_count {
            return Err(SubmitError::ClassOutOfRange { class_count });
        }
        task.status = TaskStatus::Labeled;
        task.label = Some(class);
        let done = task.clone();
        if current_counts(&st).0 == 0 {
            st.phase = Phase::Retraining;
        }
        self.shared.changed.notify_all();
        Ok(done)
    }

    /// Blocks until `pred` holds for the session status.
    pub fn wait_until(&self, mut pred: impl FnMut(&SessionStatus) -> bool) -> SessionStatus {
        let mut st = self.shared.lock();
        loop {
            let status = self.status_locked(&st);
            if pred(&status) {
                return status;
            }
            st = self
                .shared
                .changed
                .wait(st)
                .unwrap_or_else(|p| p.into_inner());
        }
    }

    fn status_locked(&self, st: &State) -> SessionStatus {
        let (open, labeled) = current_counts(st);
        SessionStatus {
            session_id: self.id.clone(),
            seed: self.ctx.seed,
            phase: st.phase,
            cycle_index: st.cycle_index,
            cycles: self.config.cycles,
            open_count: open,
            labeled_count: labeled,
            latest_report: st.reports.last().cloned(),
            reports: st.reports.clone(),
            error: st.error.clone(),
        }
    }

    /// Stops the worker at its next label barrier (or when the run ends) and
    /// waits for it to finish writing its checkpoint.
    pub fn shutdown(&self) {
        self.shared.lock().shutdown = true;
        self.shared.changed.notify_all();
        let handle = self.worker.lock().unwrap_or_else(|p| p.into_inner()).take();
        if let Some(h) = handle {
            let _ = h.join();
        }
    }
}

fn single_seed(config: &ExperimentConfig) -> Result<u64> {
    match config.seeds.as_slice() {
        [seed] => Ok(*seed),
        other => Err(Error::Config(format!(
            "an annotation session runs exactly one seed, got {}",
            other.len()
        ))),
    }
}

fn current_counts(st: &State) -> (usize, usize) {
    let open = st
        .current
        .iter()
        .filter(|id| st.tasks[*id].status == TaskStatus::Open)
        .count();
    (open, st.current.len() - open)
}

fn work(shared: Arc<Shared>, class_names: Vec<String>, start: Start, checkpoint: Option<PathBuf>) {
    let observer = SessionObserver(shared.clone());
    let fail = |message: String| {
        let mut st = shared.lock();
        st.phase = Phase::Failed;
        st.error = Some(message);
        shared.changed.notify_all();
    };
    let mut run = match start {
        Start::Restored(run) => *run,
        Start::Fresh(ctx) => match Run::from_context(ctx) {
            Ok(run) => run,
            Err(e) => return fail(e.to_string()),
        },
    };
    let mut oracle = HumanOracle {
        shared: shared.clone(),
        class_names,
    };
    loop {
        if run.is_done() {
            let mut st = shared.lock();
            st.phase = Phase::Done;
            st.current.clear();
            shared.changed.notify_all();
            break;
        }
        if let Err(e) = run.step(&mut oracle, &observer) {
            if shared.lock().shutdown {
                break;
            }
            log::error!("session worker stopped: {e}");
            fail(e.to_string());
            break;
        }
    }
    if shared.lock().shutdown {
        if let Some(path) = checkpoint {
            if let Err(e) = fs::write(&path, run.checkpoint()) {
                log::error!("writing checkpoint {}: {e}", path.display());
            }
        }
    }
}
