//! C ABI over `ual-core`.
//!
//! Every fallible function returns a [`UalStatus`]; on failure the message
//! is available from [`ual_last_error`] on the same thread. Objects cross
//! the boundary as opaque handles that the caller releases with the
//! matching `*_free` function. Strings returned by the library are owned by
//! the caller and released with [`ual_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ual_core::acquisition::{score_all, Method};
use ual_core::bayes::VariationalModel;
use ual_core::engine::{
    run_experiment, write_outputs, ExperimentConfig, NoObserver, Run, SimulatedOracle,
};
use ual_core::model::Model;
use ual_core::numeric::{Rng, Tensor};
use ual_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Integrity = 5,
    InvalidArgument = 6,
    Contract = 7,
    Oracle = 8,
    Finished = 9,
    Panic = 10,
}

/// Opaque trained model.
pub struct UalModel {
    model: Model,
}

/// Opaque single-seed run driven by the simulated oracle.
pub struct UalRun {
    run: Run,
    oracle: SimulatedOracle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> UalStatus {
    match e {
        Error::Config(_) | Error::Parse { .. } => UalStatus::Config,
        Error::Io(_) => UalStatus::Io,
        Error::Integrity(_) | Error::Json(_) => UalStatus::Integrity,
        Error::Contract(_) | Error::EmptyInput(_) => UalStatus::Contract,
        Error::Oracle(_) => UalStatus::Oracle,
        _ => UalStatus::InvalidArgument,
    }
}

/// Runs `body`, records any error or panic message and maps it to a status.
fn guard(body: impl FnOnce() -> Result<(), (UalStatus, String)>) -> UalStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            UalStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&message);
            UalStatus::Panic
        }
    }
}

fn core<T>(r: ual_core::Result<T>) -> Result<T, (UalStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (UalStatus, String) {
    (UalStatus::NullPointer, format!("{what} is null"))
}

/// Borrows a C string as `&str`.
///
/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (UalStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (UalStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes removed")
        .into_raw()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into the library on this
/// thread.
#[no_mangle]
pub extern "C" fn ual_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ual_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library that has not
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn ual_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model container from `path` into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ual_model_load(path: *const c_char, out: *mut *mut UalModel) -> UalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = text(path, "path")?;
        let model = core(Model::load(Path::new(path)))?;
        *out = Box::into_raw(Box::new(UalModel { model }));
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ual_model_free(model: *mut UalModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ual_model_class_count(model: *const UalModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.head().class_count)
}

/// Flattened per-sample feature count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ual_model_feature_dim(model: *const UalModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.input_shape().iter().product())
}

/// Feature rows as a tensor shaped for `model`.
unsafe fn features(
    model: &Model,
    x: *const f64,
    rows: usize,
) -> Result<Tensor, (UalStatus, String)> {
    if x.is_null() {
        return Err(null("x"));
    }
    if rows == 0 {
        return Err((UalStatus::InvalidArgument, "rows must be at least 1".into()));
    }
    let shape = model.input_shape();
    let d: usize = shape.iter().product();
    let data = std::slice::from_raw_parts(x, rows * d).to_vec();
    let mut full = vec![rows];
    full.extend(shape);
    core(Tensor::new(&full, data))
}

/// Monte-Carlo predictive means for `rows` samples of
/// `ual_model_feature_dim` features each (row-major). Writes
/// `rows × class_count` probabilities to `out`.
///
/// # Safety
/// `x` must hold `rows × feature_dim` values and `out` room for
/// `rows × class_count`.
#[no_mangle]
pub unsafe extern "C" fn ual_model_predict(
    model: *const UalModel,
    x: *const f64,
    rows: usize,
    samples: usize,
    lambda: f64,
    seed: u64,
    out: *mut f64,
) -> UalStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = features(model, x, rows)?;
        let dists = core(model.predict_mc(&x, samples, lambda, &mut Rng::seed_from(seed)))?;
        let k = model.head().class_count;
        let out = std::slice::from_raw_parts_mut(out, rows * k);
        for (row, d) in out.chunks_mut(k).zip(&dists) {
            row.copy_from_slice(d.mean.data());
        }
        Ok(())
    })
}

/// Acquisition scores (higher is more informative) for `rows` samples using
/// the named method, e.g. `"entropy"`. Writes `rows` values to `out`.
///
/// # Safety
/// As for [`ual_model_predict`]; `method` must be a NUL-terminated string
/// and `out` must have room for `rows` values.
#[no_mangle]
pub unsafe extern "C" fn ual_model_score(
    model: *const UalModel,
    method: *const c_char,
    x: *const f64,
    rows: usize,
    samples: usize,
    lambda: f64,
    seed: u64,
    out: *mut f64,
) -> UalStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.model;
        let method: Method = core(text(method, "method")?.parse())?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = features(model, x, rows)?;
        let mut rng = Rng::seed_from(seed);
        let dists = core(model.predict_mc(&x, samples, lambda, &mut rng))?;
        let ids: Vec<u64> = (0..rows as u64).collect();
        let scores = core(score_all(method, &ids, &dists, &mut rng))?;
        let out = std::slice::from_raw_parts_mut(out, rows);
        for (o, s) in out.iter_mut().zip(&scores) {
            *o = s.value;
        }
        Ok(())
    })
}

unsafe fn load_config(config_toml: *const c_char) -> Result<ExperimentConfig, (UalStatus, String)> {
    core(ExperimentConfig::from_toml(text(config_toml, "config")?))
}

/// Starts a run of `seed` (seed set drawn and initial model trained) for the
/// TOML experiment config `config_toml`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ual_run_start(
    config_toml: *const c_char,
    base_dir: *const c_char,
    seed: u64,
    out: *mut *mut UalRun,
) -> UalStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = load_config(config_toml)?;
        let base = text(base_dir, "base_dir")?;
        let loaded = core(cfg.dataset.load(Path::new(base)))?;
        let run = core(Run::start(&cfg, &loaded.dataset, seed, &loaded.input_hash))?;
        let oracle = SimulatedOracle::new(&run.ctx.pool);
        *out = Box::into_raw(Box::new(UalRun { run, oracle }));
        Ok(())
    })
}

/// Releases a run handle; null is ignored.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ual_run_free(run: *mut UalRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Executes one cycle; returns `Finished` when no cycle is left.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ual_run_step(run: *mut UalRun) -> UalStatus {
    guard(|| {
        let r = run.as_mut().ok_or_else(|| null("run"))?;
        if r.run.is_done() {
            return Err((UalStatus::Finished, "run has completed every cycle".into()));
        }
        core(r.run.step(&mut r.oracle, &NoObserver).map(|_| ()))
    })
}

/// 1 when the run has no cycles left, 0 otherwise (and for null).
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ual_run_is_done(run: *const UalRun) -> i32 {
    run.as_ref().is_some_and(|r| r.run.is_done()) as i32
}

/// Completed cycle reports as a JSON array in `*out` (free with
/// [`ual_string_free`]).
///
/// # Safety
/// `run` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ual_run_reports_json(
    run: *const UalRun,
    out: *mut *mut c_char,
) -> UalStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let json = serde_json::to_string(&r.run.reports)
            .map_err(|e| (UalStatus::Integrity, e.to_string()))?;
        *out = owned_string(json);
        Ok(())
    })
}

/// Copies the run's current model into a new handle.
///
/// # Safety
/// `run` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn ual_run_model(run: *const UalRun, out: *mut *mut UalModel) -> UalStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(UalModel {
            model: r.run.model.clone(),
        }));
        Ok(())
    })
}

/// Writes the run checkpoint container to `path`.
///
/// # Safety
/// `run` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ual_run_save_checkpoint(
    run: *const UalRun,
    path: *const c_char,
) -> UalStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let path = text(path, "path")?;
        core(std::fs::write(path, r.run.checkpoint()).map_err(Error::from))
    })
}

/// Runs every configured seed with the simulated oracle and writes the
/// report files into `out_dir`.
///
/// # Safety
/// String arguments must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ual_experiment_run(
    config_toml: *const c_char,
    base_dir: *const c_char,
    out_dir: *const c_char,
) -> UalStatus {
    guard(|| {
        let cfg = load_config(config_toml)?;
        let base = text(base_dir, "base_dir")?;
        let out_dir = text(out_dir, "out_dir")?;
        let loaded = core(cfg.dataset.load(Path::new(base)))?;
        let (result, runs) = core(run_experiment(
            &cfg,
            &loaded.dataset,
            &loaded.input_hash,
            &NoObserver,
        ))?;
        core(write_outputs(Path::new(out_dir), &cfg, &result, &runs))
    })
}
