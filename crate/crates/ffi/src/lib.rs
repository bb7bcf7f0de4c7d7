//! C ABI over `smoothcert`: load a checkpoint, certify or predict single
//! inputs, and call the two statistics primitives.
//!
//! Every fallible function returns an [`SmcStatus`]; on failure the message
//! is available from [`smc_last_error_message`] on the same thread until
//! the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use smoothcert::certify::{self, stats, BaseClassifier, SmoothingParams};
use smoothcert::nn::Model;
use smoothcert::Error;

/// Opaque model handle. Create with [`smc_model_load`], release with [`smc_model_free`].
pub struct SmcModel {
    model: Model<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    ShapeMismatch = 5,
    Internal = 6,
}

/// Monte Carlo settings for one call.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SmcParams {
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Outcome of [`smc_certify`]. `radius` is 0 when `abstained` is 1.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SmcCertification {
    pub predicted: u32,
    pub abstained: u8,
    pub count: u64,
    pub p_lower: f64,
    pub radius: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SmcStatus {
    match e {
        Error::Io { .. } => SmcStatus::Io,
        Error::Checkpoint(_)
        | Error::Truncated { .. }
        | Error::UnsupportedVersion { .. }
        | Error::Crc { .. }
        | Error::Manifest { .. } => SmcStatus::BadCheckpoint,
        Error::Shape(_) => SmcStatus::ShapeMismatch,
        Error::Invalid { .. } | Error::Domain(_) => SmcStatus::InvalidArgument,
        _ => SmcStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SmcStatus, String)>) -> SmcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside smoothcert".into());
            SmcStatus::Internal
        }
    }
}

fn lib(e: Error) -> (SmcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SmcStatus, String) {
    (SmcStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failure on this thread, or null. Owned by the library.
#[no_mangle]
pub extern "C" fn smc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn smc_model_load(path: *const c_char, out: *mut *mut SmcModel) -> SmcStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SmcStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = smoothcert::checkpoint::load(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(SmcModel { model }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`smc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn smc_model_free(model: *mut SmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smc_model_num_classes(model: *const SmcModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_classes())
}

/// Number of floats per input (C·H·W); 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn smc_model_input_len(model: *const SmcModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.input_len())
}

/// Defaults: n0 = 100, n = 10000, alpha = 0.001, batch = 400.
#[no_mangle]
pub extern "C" fn smc_default_params(sigma: f64, seed: u64) -> SmcParams {
    let p = SmoothingParams::new(sigma, seed);
    SmcParams {
        sigma: p.sigma,
        n0: p.n0,
        n: p.n,
        alpha: p.alpha,
        batch: p.batch,
        seed: p.seed,
    }
}

fn to_params(p: &SmcParams) -> SmoothingParams {
    SmoothingParams {
        sigma: p.sigma,
        n0: p.n0,
        n: p.n,
        alpha: p.alpha,
        batch: p.batch,
        seed: p.seed,
    }
}

unsafe fn input_slice<'a>(model: &SmcModel, input: *const f32, len: usize) -> Result<&'a [f32], (SmcStatus, String)> {
    if input.is_null() {
        return Err(null("input"));
    }
    let want = model.model.input_len();
    if len != want {
        return Err((SmcStatus::ShapeMismatch, format!("input has {len} values, model expects {want}")));
    }
    Ok(std::slice::from_raw_parts(input, len))
}

/// Certify one input. `id` keys the noise stream, so equal (seed, id)
/// pairs give equal results.
///
/// # Safety
/// `model` must be a live handle, `input` must point to `input_len` floats,
/// `params` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn smc_certify(
    model: *const SmcModel,
    input: *const f32,
    input_len: usize,
    id: u64,
    params: *const SmcParams,
    out: *mut SmcCertification,
) -> SmcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let x = input_slice(model, input, input_len)?;
        let r = certify::certify(&model.model, x, id, &to_params(params)).map_err(lib)?;
        *out = SmcCertification {
            predicted: r.predicted as u32,
            abstained: r.abstained() as u8,
            count: r.k(),
            p_lower: r.p_lower,
            radius: r.radius.unwrap_or(0.0),
        };
        Ok(())
    })
}

/// Smoothed prediction; `*out_class` is -1 on abstention.
///
/// # Safety
/// As for [`smc_certify`], with `out_class` writable.
#[no_mangle]
pub unsafe extern "C" fn smc_predict(
    model: *const SmcModel,
    input: *const f32,
    input_len: usize,
    id: u64,
    params: *const SmcParams,
    out_class: *mut i64,
) -> SmcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        let out = out_class.as_mut().ok_or_else(|| null("out_class"))?;
        let x = input_slice(model, input, input_len)?;
        let r = certify::predict(&model.model, x, id, &to_params(params)).map_err(lib)?;
        *out = r.map_or(-1, |c| c as i64);
        Ok(())
    })
}

/// Standard normal quantile.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc_inv_norm_cdf(p: f64, out: *mut f64) -> SmcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = stats::inv_norm_cdf(p).map_err(lib)?;
        Ok(())
    })
}

/// One-sided lower Clopper-Pearson bound on a binomial proportion.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn smc_clopper_pearson_lower(k: u64, n: u64, alpha: f64, out: *mut f64) -> SmcStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = stats::clopper_pearson_lower(k, n, alpha).map_err(lib)?;
        Ok(())
    })
}

#[cfg(test)]
mod tests;
