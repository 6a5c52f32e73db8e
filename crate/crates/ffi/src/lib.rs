//! C interface to aftcil.
//!
//! Every function returns an [`AftStatus`]. On failure the message is kept
//! per thread and can be read with [`aft_last_error`]. Handles are opaque
//! and must be released with their `_free` function. Panics never cross the
//! boundary; they are reported as `AFT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use aftcil::audio::{extract_mfcc, normalize_clip, AudioClip, FrontendConfig};
use aftcil::checkpoint::ModelBundle;
use aftcil::dataset::{ingest, DatasetManifest};
use aftcil::engine::{compute_acc, compute_bwt, run_method, AccuracyMatrix, RunConfig, RunReport};
use aftcil::report::write_run_dir;
use aftcil::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AftStatus {
    Ok = 0,
    /// Bad argument, null pointer or invalid configuration.
    InvalidArgument = 1,
    /// Unreadable or inconsistent data, I/O failure, corrupt checkpoint.
    DataError = 2,
    /// Non-finite loss or an internal shape failure.
    NumericError = 3,
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: AftStatus, msg: impl Into<String>) -> AftStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> AftStatus {
    let status = match e.exit_code() {
        1 => AftStatus::InvalidArgument,
        3 => AftStatus::NumericError,
        _ => AftStatus::DataError,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), AftStatus>) -> AftStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AftStatus::Ok,
        Ok(Err(s)) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(AftStatus::Panic, format!("panic: {msg}"))
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, AftStatus>;
}

impl<T> OrStatus<T> for aftcil::Result<T> {
    fn or_status(self) -> Result<T, AftStatus> {
        self.map_err(from_error)
    }
}

fn null(name: &str) -> AftStatus {
    fail(AftStatus::InvalidArgument, format!("{name} is null"))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, AftStatus> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(AftStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], AftStatus> {
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn aft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// MFCCs of a mono clip with the default front end (16 kHz, first 3 s,
/// 40 coefficients). The clip is resampled and padded first.
///
/// Writes `n_coeffs * frames` values coefficient-major into `out`. With
/// `out` null only the dimensions are reported.
///
/// # Safety
/// `samples` must point to `n_samples` readable values and `out`, when not
/// null, to `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn aft_mfcc_extract(
    samples: *const f64,
    n_samples: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
    n_coeffs: *mut usize,
    frames: *mut usize,
) -> AftStatus {
    guard(|| {
        let samples = slice_arg(samples, n_samples, "samples")?;
        if n_coeffs.is_null() || frames.is_null() {
            return Err(null("n_coeffs/frames"));
        }
        let cfg = FrontendConfig::default();
        let clip = AudioClip::mono("ffi", 0, sample_rate, samples.to_vec());
        let clip = normalize_clip(&clip, cfg.sample_rate, cfg.target_seconds).or_status()?;
        let map = extract_mfcc(&clip, &cfg).or_status()?;
        *n_coeffs = map.n_coeffs;
        *frames = map.frames;
        if out.is_null() {
            return Ok(());
        }
        if out_len < map.data.len() {
            return Err(fail(
                AftStatus::InvalidArgument,
                format!("output holds {out_len} values, {} needed", map.data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, map.data.len()).copy_from_slice(&map.data);
        Ok(())
    })
}

unsafe fn lower_triangle(matrix: *const f64, tasks: usize) -> Result<AccuracyMatrix, AftStatus> {
    if tasks == 0 {
        return Err(fail(AftStatus::InvalidArgument, "tasks must be positive"));
    }
    let m = slice_arg(matrix, tasks * tasks, "matrix")?;
    let rows = (0..tasks).map(|t| m[t * tasks..t * tasks + t + 1].to_vec()).collect();
    AccuracyMatrix::from_rows(rows).or_status()
}

/// Average accuracy over the final row of a `tasks x tasks` row-major
/// accuracy matrix. Entries above the diagonal are ignored.
///
/// # Safety
/// `matrix` must point to `tasks * tasks` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_compute_acc(matrix: *const f64, tasks: usize, out: *mut f64) -> AftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = compute_acc(&lower_triangle(matrix, tasks)?).or_status()?;
        Ok(())
    })
}

/// Backward transfer of a `tasks x tasks` row-major accuracy matrix;
/// needs at least two tasks.
///
/// # Safety
/// As for [`aft_compute_acc`].
#[no_mangle]
pub unsafe extern "C" fn aft_compute_bwt(matrix: *const f64, tasks: usize, out: *mut f64) -> AftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = compute_bwt(&lower_triangle(matrix, tasks)?).or_status()?;
        Ok(())
    })
}

/// A configured training run over one dataset.
pub struct AftRun {
    config: RunConfig,
    dataset: PathBuf,
    report: Option<RunReport>,
}

/// Creates a run from a TOML config (null for defaults) and a dataset path
/// in any layout the command-line `ingest` accepts.
///
/// # Safety
/// String arguments must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_run_new(config_path: *const c_char, dataset_path: *const c_char, out: *mut *mut AftRun) -> AftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&path_arg(config_path, "config_path")?).or_status()?
        };
        let dataset = path_arg(dataset_path, "dataset_path")?;
        *out = Box::into_raw(Box::new(AftRun {
            config,
            dataset,
            report: None,
        }));
        Ok(())
    })
}

/// Overrides the seed, epoch count and batch size; zero keeps the
/// configured value for epochs and batch size.
///
/// # Safety
/// `run` must come from [`aft_run_new`].
#[no_mangle]
pub unsafe extern "C" fn aft_run_set_schedule(run: *mut AftRun, seed: u64, epochs: usize, batch: usize) -> AftStatus {
    guard(|| {
        let run = run.as_mut().ok_or_else(|| null("run"))?;
        run.config.seed = seed;
        if epochs > 0 {
            run.config.epochs = epochs;
        }
        if batch > 0 {
            run.config.batch_size = batch;
        }
        run.config.validate().or_status()
    })
}

/// Ingests the dataset (using its feature cache) and trains the whole task
/// sequence. Blocks until done.
///
/// # Safety
/// `run` must come from [`aft_run_new`].
#[no_mangle]
pub unsafe extern "C" fn aft_run_execute(run: *mut AftRun) -> AftStatus {
    guard(|| {
        let run = run.as_mut().ok_or_else(|| null("run"))?;
        let manifest = DatasetManifest::load(&run.dataset).or_status()?;
        let (corpus, _) = ingest(&manifest, &run.config.frontend, &manifest.default_cache_path()).or_status()?;
        run.report = Some(run_method(&run.config, &corpus).or_status()?);
        Ok(())
    })
}

unsafe fn finished<'a>(run: *const AftRun) -> Result<&'a RunReport, AftStatus> {
    let run = run.as_ref().ok_or_else(|| null("run"))?;
    run.report
        .as_ref()
        .ok_or_else(|| fail(AftStatus::InvalidArgument, "run has not been executed"))
}

/// # Safety
/// `run` must come from [`aft_run_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_run_acc(run: *const AftRun, out: *mut f64) -> AftStatus {
    guard(|| {
        let report = finished(run)?;
        *out.as_mut().ok_or_else(|| null("out"))? = report.acc;
        Ok(())
    })
}

/// Sets `*defined` to false for joint training, which has no backward
/// transfer.
///
/// # Safety
/// `run` must come from [`aft_run_new`]; `out` and `defined` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aft_run_bwt(run: *const AftRun, out: *mut f64, defined: *mut bool) -> AftStatus {
    guard(|| {
        let report = finished(run)?;
        let (out, defined) = match (out.as_mut(), defined.as_mut()) {
            (Some(o), Some(d)) => (o, d),
            _ => return Err(null("out/defined")),
        };
        *defined = report.bwt.is_some();
        *out = report.bwt.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Writes the executed run to a new directory, as `aftcil train` does.
///
/// # Safety
/// `run` must come from [`aft_run_new`]; `dir` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn aft_run_write(run: *const AftRun, dir: *const c_char) -> AftStatus {
    guard(|| {
        let report = finished(run)?;
        write_run_dir(report, &path_arg(dir, "dir")?).or_status()
    })
}

/// # Safety
/// `run` must come from [`aft_run_new`] or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn aft_run_free(run: *mut AftRun) {
    if !run.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(run))));
    }
}

/// A stored model that labels raw audio.
pub struct AftClassifier {
    bundle: ModelBundle,
    names: Vec<CString>,
}

/// Loads a checkpoint written by a run (`model.ckpt`).
///
/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aft_classifier_load(path: *const c_char, out: *mut *mut AftClassifier) -> AftStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let bundle = ModelBundle::load(&path_arg(path, "path")?).or_status()?;
        let names = bundle
            .meta
            .class_names
            .iter()
            .map(|n| CString::new(n.replace('\0', " ")).expect("no interior nul"))
            .collect();
        *out = Box::into_raw(Box::new(AftClassifier { bundle, names }));
        Ok(())
    })
}

/// Number of classes the model can output; 0 for a null handle.
///
/// # Safety
/// `c` must come from [`aft_classifier_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn aft_classifier_num_classes(c: *const AftClassifier) -> usize {
    c.as_ref().map_or(0, |c| c.names.len())
}

/// Name of class `index`, owned by the handle; null when out of range.
///
/// # Safety
/// `c` must come from [`aft_classifier_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn aft_classifier_class_name(c: *const AftClassifier, index: usize) -> *const c_char {
    c.as_ref()
        .and_then(|c| c.names.get(index))
        .map_or(ptr::null(), |n| n.as_ptr())
}

/// Classifies a mono clip; `*class_index` indexes
/// [`aft_classifier_class_name`].
///
/// # Safety
/// `samples` must point to `n_samples` values; `class_index` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn aft_classifier_predict(
    c: *const AftClassifier,
    samples: *const f64,
    n_samples: usize,
    sample_rate: u32,
    class_index: *mut usize,
) -> AftStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("classifier"))?;
        let samples = slice_arg(samples, n_samples, "samples")?;
        let out = class_index.as_mut().ok_or_else(|| null("class_index"))?;
        let clip = AudioClip::mono("ffi", 0, sample_rate, samples.to_vec());
        *out = c.bundle.predict_clip(&clip).or_status()?;
        Ok(())
    })
}

/// # Safety
/// `c` must come from [`aft_classifier_load`] or be null; it is invalid
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn aft_classifier_free(c: *mut AftClassifier) {
    if !c.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(c))));
    }
}
