//! C interface to the `macs` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`MacsStatus`]; the message of the most recent failure on the calling
//! thread is available from [`macs_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use macs::config::{PipelineConfig, Profile};
use macs::encoder::SkillModel;
use macs::error::Error;
use macs::pipeline::{Pipeline, Stage};
use macs::skilldb::{self, Metric, SkillDatabase};

/// Status codes. Codes 1 to 4 mirror the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacsStatus {
    Ok = 0,
    Error = 1,
    Config = 2,
    Stale = 3,
    Numeric = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacsMetric {
    Cosine = 0,
    Euclidean = 1,
}

impl From<MacsMetric> for Metric {
    fn from(m: MacsMetric) -> Self {
        match m {
            MacsMetric::Cosine => Metric::Cosine,
            MacsMetric::Euclidean => Metric::Euclidean,
        }
    }
}

/// Opaque pipeline handle.
pub struct MacsPipeline(Pipeline);
/// Opaque skill encoder handle.
pub struct MacsEncoder(SkillModel);
/// Opaque skill database handle.
pub struct MacsDatabase(SkillDatabase);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MacsStatus {
    match e.exit_code() {
        2 => MacsStatus::Config,
        3 => MacsStatus::Stale,
        4 => MacsStatus::Numeric,
        _ => MacsStatus::Error,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Utf8(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MacsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MacsStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("null pointer passed for `{arg}`"));
            MacsStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(arg))) => {
            set_error(format!("`{arg}` is not valid UTF-8"));
            MacsStatus::InvalidUtf8
        }
        Err(_) => {
            set_error("internal panic".into());
            MacsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(name))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

/// Reads `len` rows of `dim` values from a row-major buffer.
unsafe fn rows_arg(p: *const f64, len: usize, dim: usize, name: &'static str) -> Result<Vec<Vec<f64>>, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    let flat = std::slice::from_raw_parts(p, len * dim);
    Ok(flat.chunks(dim.max(1)).take(len).map(|r| r.to_vec()).collect())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn macs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates a pipeline writing under `out_dir`. `config_toml` may be null, in
/// which case `profile` ("desk" or "paper-scale") selects a built-in config.
///
/// # Safety
/// String arguments must be null or valid nul-terminated strings; `out` must
/// be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn macs_pipeline_new(
    config_toml: *const c_char,
    profile: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut MacsPipeline,
) -> MacsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = str_arg(out_dir, "out_dir")?;
        let cfg = if config_toml.is_null() {
            PipelineConfig::profile(str_arg(profile, "profile")?.parse::<Profile>()?)
        } else {
            PipelineConfig::from_toml(str_arg(config_toml, "config_toml")?)?
        };
        let p = Pipeline::new(cfg, PathBuf::from(dir))?;
        *out = Box::into_raw(Box::new(MacsPipeline(p)));
        Ok(())
    })
}

/// Runs one stage by CLI name (e.g. "gen-data"), or every stage for "run".
///
/// # Safety
/// `handle` must come from [`macs_pipeline_new`]; `stage` must be a valid
/// nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn macs_pipeline_run(handle: *mut MacsPipeline, stage: *const c_char, force: bool) -> MacsStatus {
    guard(|| {
        let p = &mut out_arg(handle, "handle")?.0;
        let name = str_arg(stage, "stage")?;
        p.force = force;
        if name == "run" {
            p.run_all()?;
            return Ok(());
        }
        let stage = Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage {name:?}")))?;
        p.run(stage)?;
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`macs_pipeline_new`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn macs_pipeline_free(handle: *mut MacsPipeline) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Loads a trained skill encoder.
///
/// # Safety
/// `path` must be a valid nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn macs_encoder_load(path: *const c_char, out: *mut *mut MacsEncoder) -> MacsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (m, _) = SkillModel::load(std::path::Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(MacsEncoder(m)));
        Ok(())
    })
}

/// Skill vector dimension of the encoder.
///
/// # Safety
/// `handle` must come from [`macs_encoder_load`].
#[no_mangle]
pub unsafe extern "C" fn macs_encoder_dim(handle: *const MacsEncoder, out: *mut usize) -> MacsStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(handle, "handle")?.0.cfg.d_model;
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`macs_encoder_load`].
#[no_mangle]
pub unsafe extern "C" fn macs_encoder_free(handle: *mut MacsEncoder) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Loads a skill database directory, verifying checksums.
///
/// # Safety
/// `dir` must be a valid nul-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn macs_db_load(dir: *const c_char, out: *mut *mut MacsDatabase) -> MacsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let db = SkillDatabase::load(std::path::Path::new(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(MacsDatabase(db)));
        Ok(())
    })
}

/// Number of entries and skill dimension.
///
/// # Safety
/// `handle` must come from [`macs_db_load`]; outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn macs_db_shape(handle: *const MacsDatabase, len: *mut usize, dim: *mut usize) -> MacsStatus {
    guard(|| {
        let db = &ref_arg(handle, "handle")?.0;
        *out_arg(len, "len")? = db.len();
        *out_arg(dim, "dim")? = db.dim();
        Ok(())
    })
}

/// FastDTW distance between `query` (`query_len` x dim, row-major) and
/// entry `index` of the database.
///
/// # Safety
/// `query` must hold `query_len * dim` values; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn macs_db_distance(
    handle: *const MacsDatabase,
    index: usize,
    query: *const f64,
    query_len: usize,
    radius: usize,
    metric: MacsMetric,
    out: *mut f64,
) -> MacsStatus {
    guard(|| {
        let db = &ref_arg(handle, "handle")?.0;
        let out = out_arg(out, "out")?;
        let entry = db
            .entries
            .get(index)
            .ok_or_else(|| Error::InvalidInput(format!("index {index} out of range ({} entries)", db.len())))?;
        let q = rows_arg(query, query_len, db.dim(), "query")?;
        *out = skilldb::fastdtw(&q, &entry.z, radius, metric.into())?;
        Ok(())
    })
}

/// # Safety
/// `handle` must be null or come from [`macs_db_load`].
#[no_mangle]
pub unsafe extern "C" fn macs_db_free(handle: *mut MacsDatabase) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Cosine distance `1 - cos(a, b)` between two vectors of length `dim`.
///
/// # Safety
/// `a` and `b` must hold `dim` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn macs_cosine_distance(a: *const f64, b: *const f64, dim: usize, out: *mut f64) -> MacsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let a = rows_arg(a, 1, dim, "a")?;
        let b = rows_arg(b, 1, dim, "b")?;
        *out = skilldb::cosine_distance(&a[0], &b[0])?;
        Ok(())
    })
}

/// FastDTW distance between two row-major sequences of `dim`-vectors.
///
/// # Safety
/// `a` must hold `len_a * dim` values and `b` `len_b * dim`; `out` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn macs_fastdtw(
    a: *const f64,
    len_a: usize,
    b: *const f64,
    len_b: usize,
    dim: usize,
    radius: usize,
    metric: MacsMetric,
    out: *mut f64,
) -> MacsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let a = rows_arg(a, len_a, dim, "a")?;
        let b = rows_arg(b, len_b, dim, "b")?;
        *out = skilldb::fastdtw(&a, &b, radius, metric.into())?;
        Ok(())
    })
}

/// Standard error of a success rate `p` over `n` episodes.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn macs_sem(p: f64, n: usize, out: *mut f64) -> MacsStatus {
    guard(|| {
        *out_arg(out, "out")? = macs::evalkit::sem(p, n)?;
        Ok(())
    })
}
