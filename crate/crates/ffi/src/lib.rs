//! C ABI for psweight.
//!
//! Objects are opaque handles created by `psw_*_new`/`psw_*_fit`/
//! `psw_*_compute` and released with the matching `psw_*_free`. Every
//! fallible call returns a [`PswStatus`]; on failure the message is
//! available from [`psw_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use psweight::asymptotics::{relative_variance, Density, ScenarioSpec};
use psweight::dataset::Dataset;
use psweight::propensity::{fit, FitError, FitOptions, PropensityModel};
use psweight::weights::{compute, WeightError, WeightScheme, WeightedSample};
use psweight::{balance, estimate};

/// Opaque dataset handle.
pub struct PswDataset(Dataset);
/// Opaque fitted propensity model.
pub struct PswModel(PropensityModel);
/// Opaque weight vector with its scheme.
pub struct PswWeights(WeightedSample);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PswStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    FitError = 4,
    /// The fit finished but probabilities reached 0 or 1; the model is
    /// still returned.
    Separation = 5,
    WeightError = 6,
    EmptyTargetPopulation = 7,
    EstimateError = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PswScheme {
    Unweighted = 0,
    /// Inverse probability (combined population).
    Ht = 1,
    Att = 2,
    Atc = 3,
    /// Uses the `alpha` argument.
    Truncated = 4,
    Overlap = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg.into()));
}

fn fail(status: PswStatus, msg: impl Into<String>) -> PswStatus {
    set_error(msg);
    status
}

fn guard(body: impl FnOnce() -> PswStatus) -> PswStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(_) => fail(PswStatus::Panic, "internal panic"),
    }
}

fn scheme_of(scheme: PswScheme, alpha: f64) -> Result<WeightScheme, WeightError> {
    Ok(match scheme {
        PswScheme::Unweighted => WeightScheme::Unweighted,
        PswScheme::Ht => WeightScheme::Combined,
        PswScheme::Att => WeightScheme::Treated,
        PswScheme::Atc => WeightScheme::Control,
        PswScheme::Truncated => WeightScheme::truncated(alpha)?,
        PswScheme::Overlap => WeightScheme::Overlap,
    })
}

fn weight_status(e: WeightError) -> PswStatus {
    let status = match e {
        WeightError::EmptyTargetPopulation(_) => PswStatus::EmptyTargetPopulation,
        WeightError::InvalidAlpha(_) => PswStatus::InvalidArgument,
        _ => PswStatus::WeightError,
    };
    fail(status, e.to_string())
}

unsafe fn copy_out(values: &[f64], buf: *mut f64, len: usize) -> PswStatus {
    if buf.is_null() {
        return fail(PswStatus::NullPointer, "output buffer is null");
    }
    if len < values.len() {
        return fail(
            PswStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", values.len()),
        );
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    PswStatus::Ok
}

/// Message of the last failed call on this thread, or NULL. Free with
/// [`psw_string_free`].
#[no_mangle]
pub extern "C" fn psw_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match e.borrow().as_deref() {
        Some(m) => CString::new(m.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must come from [`psw_last_error_message`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn psw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a dataset from `n` units and `k` covariates stored row-major in
/// `covariates` (`n * k` values). `treatment` holds 0/1 bytes; `outcome`
/// may be NULL. Covariates are named `x1..xk`.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `out` must be valid
/// for writing.
#[no_mangle]
pub unsafe extern "C" fn psw_dataset_new(
    n: usize,
    treatment: *const u8,
    outcome: *const f64,
    k: usize,
    covariates: *const f64,
    out: *mut *mut PswDataset,
) -> PswStatus {
    guard(|| {
        if treatment.is_null() || out.is_null() || (k > 0 && covariates.is_null()) {
            return fail(PswStatus::NullPointer, "null argument");
        }
        let z = std::slice::from_raw_parts(treatment, n);
        if let Some(i) = z.iter().position(|v| *v > 1) {
            return fail(PswStatus::DataError, format!("treatment[{i}] is not 0 or 1"));
        }
        let y = (!outcome.is_null()).then(|| std::slice::from_raw_parts(outcome, n).to_vec());
        let x = if k > 0 { std::slice::from_raw_parts(covariates, n * k) } else { &[] };
        let columns = (0..k)
            .map(|j| (format!("x{}", j + 1), (0..n).map(|i| x[i * k + j]).collect()))
            .collect();
        match Dataset::new(z.iter().map(|v| *v == 1).collect(), y, columns, None) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(PswDataset(d)));
                PswStatus::Ok
            }
            Err(e) => fail(PswStatus::DataError, e.to_string()),
        }
    })
}

/// # Safety
/// `data` must come from [`psw_dataset_new`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn psw_dataset_free(data: *mut PswDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Logistic maximum-likelihood fit on all covariates. On
/// `PswStatus::Separation` the model is still written to `out`.
///
/// # Safety
/// `data` must be a live dataset handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn psw_model_fit(data: *const PswDataset, out: *mut *mut PswModel) -> PswStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return fail(PswStatus::NullPointer, "null argument");
        }
        match fit(&(*data).0, &FitOptions::default()) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(PswModel(m)));
                PswStatus::Ok
            }
            Err(FitError::Separation(m)) => {
                set_error(m.separation().unwrap_or("separation").to_string());
                *out = Box::into_raw(Box::new(PswModel(*m)));
                PswStatus::Separation
            }
            Err(e) => fail(PswStatus::FitError, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from [`psw_model_fit`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn psw_model_free(model: *mut PswModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of coefficients (intercept plus slopes); 0 for NULL.
///
/// # Safety
/// `model` must be a live model handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn psw_model_n_coefficients(model: *const PswModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.coefficients().len())
}

/// Copies the coefficients, intercept first, into `buf`.
///
/// # Safety
/// `model` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn psw_model_coefficients(model: *const PswModel, buf: *mut f64, len: usize) -> PswStatus {
    match model.as_ref() {
        Some(m) => copy_out(m.0.coefficients(), buf, len),
        None => fail(PswStatus::NullPointer, "null model"),
    }
}

/// Copies the fitted propensity scores into `buf`.
///
/// # Safety
/// `model` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn psw_model_scores(model: *const PswModel, buf: *mut f64, len: usize) -> PswStatus {
    match model.as_ref() {
        Some(m) => copy_out(m.0.scores(), buf, len),
        None => fail(PswStatus::NullPointer, "null model"),
    }
}

/// Balancing weights for `scheme`; `alpha` is used only by
/// `PswScheme::Truncated`.
///
/// # Safety
/// Handles must be live and belong to the same data; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn psw_weights_compute(
    model: *const PswModel,
    data: *const PswDataset,
    scheme: PswScheme,
    alpha: f64,
    out: *mut *mut PswWeights,
) -> PswStatus {
    guard(|| {
        if model.is_null() || data.is_null() || out.is_null() {
            return fail(PswStatus::NullPointer, "null argument");
        }
        let scheme = match scheme_of(scheme, alpha) {
            Ok(s) => s,
            Err(e) => return weight_status(e),
        };
        match compute(&(*model).0, &(*data).0, &scheme) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(PswWeights(w)));
                PswStatus::Ok
            }
            Err(e) => weight_status(e),
        }
    })
}

/// # Safety
/// `weights` must come from [`psw_weights_compute`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn psw_weights_free(weights: *mut PswWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Unnormalized per-unit weights.
///
/// # Safety
/// `weights` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn psw_weights_raw(weights: *const PswWeights, buf: *mut f64, len: usize) -> PswStatus {
    match weights.as_ref() {
        Some(w) => copy_out(w.0.raw(), buf, len),
        None => fail(PswStatus::NullPointer, "null weights"),
    }
}

/// Weights normalized to sum to one within each group.
///
/// # Safety
/// `weights` must be live; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn psw_weights_normalized(weights: *const PswWeights, buf: *mut f64, len: usize) -> PswStatus {
    match weights.as_ref() {
        Some(w) => copy_out(w.0.normalized(), buf, len),
        None => fail(PswStatus::NullPointer, "null weights"),
    }
}

/// Weighted difference of group mean outcomes.
///
/// # Safety
/// Handles must be live; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn psw_wate(data: *const PswDataset, weights: *const PswWeights, out: *mut f64) -> PswStatus {
    guard(|| {
        if data.is_null() || weights.is_null() || out.is_null() {
            return fail(PswStatus::NullPointer, "null argument");
        }
        match estimate::wate(&(*data).0, &(*weights).0) {
            Ok(t) => {
                *out = t;
                PswStatus::Ok
            }
            Err(e) => fail(PswStatus::EstimateError, e.to_string()),
        }
    })
}

/// Largest absolute standardized bias over the covariates.
///
/// # Safety
/// Handles must be live; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn psw_max_asb(data: *const PswDataset, weights: *const PswWeights, out: *mut f64) -> PswStatus {
    guard(|| {
        if data.is_null() || weights.is_null() || out.is_null() {
            return fail(PswStatus::NullPointer, "null argument");
        }
        match balance::asb(&(*data).0, &(*weights).0) {
            Ok(r) => {
                *out = r.max_asb;
                PswStatus::Ok
            }
            Err(e) => fail(PswStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Design-effect variance inflation of the weights (1 for constant weights).
///
/// # Safety
/// `weights` must be live; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn psw_variance_inflation(weights: *const PswWeights, out: *mut f64) -> PswStatus {
    guard(|| {
        if weights.is_null() || out.is_null() {
            return fail(PswStatus::NullPointer, "null argument");
        }
        match psweight::propensity::variance_inflation_preview(&(*weights).0) {
            Ok(v) => {
                *out = v;
                PswStatus::Ok
            }
            Err(e) => weight_status(e),
        }
    })
}

/// Asymptotic variance relative to the unweighted difference of means for
/// normal covariate densities N(mu1, sd1^2) and N(mu0, sd0^2) with group size
/// ratio n0/n1 = `size_ratio`. Divergent integrals give +infinity.
///
/// # Safety
/// `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn psw_relative_variance_normal(
    mu1: f64,
    sd1: f64,
    mu0: f64,
    sd0: f64,
    size_ratio: f64,
    scheme: PswScheme,
    alpha: f64,
    out: *mut f64,
) -> PswStatus {
    guard(|| {
        if out.is_null() {
            return fail(PswStatus::NullPointer, "null argument");
        }
        let scheme = match scheme_of(scheme, alpha) {
            Ok(s) => s,
            Err(e) => return weight_status(e),
        };
        let spec = match ScenarioSpec::new("ffi", Density::normal(mu1, sd1), Density::normal(mu0, sd0), size_ratio) {
            Ok(s) => s,
            Err(e) => return fail(PswStatus::InvalidArgument, e.to_string()),
        };
        match relative_variance(&spec, &scheme) {
            Ok(r) => {
                *out = r.relative_variance;
                PswStatus::Ok
            }
            Err(e) => fail(PswStatus::InvalidArgument, e.to_string()),
        }
    })
}
