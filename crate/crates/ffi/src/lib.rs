//! C ABI over `cat-core`.
//!
//! Every function returns a [`CatStatus`]; on failure the message is kept
//! per thread and read back with [`cat_last_error_message`]. Objects cross
//! the boundary only as opaque handles that the caller releases with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cat_core::harness::{
    gen_dataset, open_experiment, DatasetKind, Experiment, ExperimentConfig, RunSpec, SyntheticDataset,
};
use cat_core::metrics::{cosine_sim, harmonic_mean, kps_features};
use cat_core::training::Mode;
use cat_core::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Diverged = 6,
    Numeric = 7,
    Panic = 8,
}

/// Scores of one evaluated fine-tuning run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CatMetrics {
    pub prompt_score: f64,
    pub identity_score: f64,
    pub kps: f64,
}

/// A generated dataset.
pub struct CatDataset(SyntheticDataset);

/// A pretrained base with its feature encoder.
pub struct CatExperiment(Experiment);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CatStatus {
    match e {
        Error::Config(_) | Error::EncoderAccuracy { .. } => CatStatus::Config,
        Error::Io { .. } => CatStatus::Io,
        Error::Format(_) | Error::Topology(_) => CatStatus::Format,
        Error::Diverged { .. } => CatStatus::Diverged,
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => CatStatus::Numeric,
        _ => CatStatus::InvalidArgument,
    }
}

struct Failure(CatStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CatStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CatStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CatStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(CatStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null("handle"))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Writes the full message length, excluding the NUL,
/// to `needed` when it is non-null. An empty string means no error.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn cat_last_error_message(buf: *mut c_char, len: usize, needed: *mut usize) -> CatStatus {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map(|c| c.as_bytes()).unwrap_or(&[]);
        if let Some(n) = needed.as_mut() {
            *n = bytes.len();
        }
        if len == 0 {
            return CatStatus::Ok;
        }
        if buf.is_null() {
            return CatStatus::NullPointer;
        }
        let k = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, k);
        *buf.add(k) = 0;
        CatStatus::Ok
    })
}

/// Generates the dataset `kind` ("shapes16" or "gauss2d") for `seed`.
///
/// # Safety
/// `kind` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_dataset_generate(kind: *const c_char, seed: u64, out: *mut *mut CatDataset) -> CatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind: DatasetKind = str_arg(kind, "kind")?.parse()?;
        *out = Box::into_raw(Box::new(CatDataset(gen_dataset(kind, seed))));
        Ok(())
    })
}

/// Number of base-class samples and their dimension.
///
/// # Safety
/// `ds` must come from [`cat_dataset_generate`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_dataset_shape(ds: *const CatDataset, len: *mut usize, dim: *mut usize) -> CatStatus {
    guard(|| {
        let ds = &handle(ds)?.0;
        *out_arg(len, "len")? = ds.samples.len();
        *out_arg(dim, "dim")? = ds.data_dim();
        Ok(())
    })
}

/// Copies sample `index` into `buf` (`buf_len` must equal the dimension)
/// and its class label into `label`.
///
/// # Safety
/// `buf` must point to `buf_len` writable doubles; `label` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_dataset_sample(
    ds: *const CatDataset,
    index: usize,
    buf: *mut f64,
    buf_len: usize,
    label: *mut usize,
) -> CatStatus {
    guard(|| {
        let ds = &handle(ds)?.0;
        let sample = ds
            .samples
            .get(index)
            .ok_or_else(|| Failure(CatStatus::InvalidArgument, format!("sample {index} out of range")))?;
        if buf_len != sample.len() {
            return Err(Failure(
                CatStatus::InvalidArgument,
                format!("buffer holds {buf_len}, sample has {}", sample.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(sample.as_ptr(), buf, buf_len);
        *out_arg(label, "label")? = ds.labels[index];
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`cat_dataset_generate`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cat_dataset_free(ds: *mut CatDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Cosine similarity of two length-`n` vectors.
///
/// # Safety
/// `a` and `b` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_cosine_similarity(a: *const f64, b: *const f64, n: usize, out: *mut f64) -> CatStatus {
    guard(|| {
        let (a, b) = (slice_arg(a, n, "a")?, slice_arg(b, n, "b")?);
        *out_arg(out, "out")? = cosine_sim(a, b)?;
        Ok(())
    })
}

/// Harmonic mean of `n` positive values.
///
/// # Safety
/// `xs` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_harmonic_mean(xs: *const f64, n: usize, out: *mut f64) -> CatStatus {
    guard(|| {
        let xs = slice_arg(xs, n, "xs")?;
        *out_arg(out, "out")? = harmonic_mean(xs)?;
        Ok(())
    })
}

/// Knowledge preservation score over `pairs` row-major feature pairs of
/// width `dim`.
///
/// # Safety
/// `with_token` and `without_token` must each point to `pairs * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cat_kps_features(
    with_token: *const f64,
    without_token: *const f64,
    pairs: usize,
    dim: usize,
    out: *mut f64,
) -> CatStatus {
    guard(|| {
        let n = pairs
            .checked_mul(dim)
            .ok_or_else(|| Failure(CatStatus::InvalidArgument, "pairs * dim overflows".into()))?;
        if dim == 0 {
            return Err(Failure(CatStatus::InvalidArgument, "dim must be positive".into()));
        }
        let rows = |s: &[f64]| s.chunks(dim).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let with = rows(slice_arg(with_token, n, "with_token")?);
        let without = rows(slice_arg(without_token, n, "without_token")?);
        *out_arg(out, "out")? = kps_features(&with, &without)?.score;
        Ok(())
    })
}

/// Opens an experiment: reads the TOML config at `config_path` (built-in
/// glyph defaults when null), overrides its output directory with
/// `out_dir` when non-null, then loads or pretrains the base and encoder
/// checkpoints there.
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_experiment_open(
    config_path: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut CatExperiment,
) -> CatStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut config = if config_path.is_null() {
            ExperimentConfig::shapes16()
        } else {
            ExperimentConfig::load(&PathBuf::from(str_arg(config_path, "config_path")?))?
        };
        if !out_dir.is_null() {
            config.output_dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        }
        *out = Box::into_raw(Box::new(CatExperiment(open_experiment(config)?)));
        Ok(())
    })
}

/// Fine-tunes one adapter in `mode` ("lora", "cat", "prior_preservation"
/// or "textual_embedding") on the configured identity and scores it.
///
/// # Safety
/// `exp` must come from [`cat_experiment_open`]; `mode` must be
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cat_experiment_run(
    exp: *const CatExperiment,
    mode: *const c_char,
    alpha: f64,
    seed: u64,
    steps: usize,
    lr: f64,
    out: *mut CatMetrics,
) -> CatStatus {
    guard(|| {
        let exp = &handle(exp)?.0;
        let out = out_arg(out, "out")?;
        let mode: Mode = str_arg(mode, "mode")?.parse()?;
        let spec = RunSpec { mode, alpha, seed, steps, lr };
        spec.train_config(&exp.config.train).validate()?;
        let r = exp.run(&spec)?.report;
        *out = CatMetrics { prompt_score: r.prompt_score(), identity_score: r.identity_score(), kps: r.kps() };
        Ok(())
    })
}

/// # Safety
/// `exp` must come from [`cat_experiment_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cat_experiment_free(exp: *mut CatExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}
