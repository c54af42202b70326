//! C ABI over the core pipeline: load a run configuration, check
//! identification, simulate, fit, and query estimands through opaque
//! handles. Every fallible call returns an `int32_t` status code (matching
//! the CLI exit codes) or a null pointer; `mdam_last_error` returns a
//! thread-local message for the most recent failure.
//!
//! Strings passed in must be valid UTF-8 and NUL-terminated. Strings
//! returned stay owned by the library.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};

use libc::c_char;

use mdam_core::config::RunConfig;
use mdam_core::data::{parse_target, MissingnessSummary, Predicate};
use mdam_core::diagnostics::estimand_summary;
use mdam_core::runner::{cmd_fit, cmd_simulate, FitOverrides, FitResult};
use mdam_core::spec::{count_identification, Verdict};
use mdam_core::Error;

pub const MDAM_OK: i32 = 0;
pub const MDAM_ERR_VALIDATION: i32 = 2;
pub const MDAM_ERR_IO: i32 = 3;
pub const MDAM_ERR_NUMERIC: i32 = 4;
/// Null pointer, bad UTF-8, or an argument outside its domain.
pub const MDAM_ERR_ARGUMENT: i32 = 5;

/// Sentinel for "use the seed from the configuration file".
pub const MDAM_SEED_FROM_CONFIG: u64 = u64::MAX;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(e: &Error) -> i32 {
    e.exit_code()
}

fn fail(e: Error) -> i32 {
    set_error(&e.to_string());
    code_of(&e)
}

/// Opaque handle: a parsed run configuration.
pub struct MdamConfig {
    cfg: RunConfig,
    path: PathBuf,
}

/// Opaque handle: a completed fit (chains plus model metadata).
pub struct MdamFit {
    fit: FitResult,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MDAM_ERR_ARGUMENT);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        MDAM_ERR_ARGUMENT
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mdam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn mdam_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Parse a TOML run configuration. Returns null on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string pointer.
#[no_mangle]
pub unsafe extern "C" fn mdam_config_load(path: *const c_char) -> *mut MdamConfig {
    let Ok(path) = (unsafe { cstr(path) }) else {
        return std::ptr::null_mut();
    };
    match RunConfig::from_path(path) {
        Ok(cfg) => Box::into_raw(Box::new(MdamConfig {
            cfg,
            path: PathBuf::from(path),
        })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `cfg` must be a pointer from `mdam_config_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdam_config_free(cfg: *mut MdamConfig) {
    if !cfg.is_null() {
        drop(unsafe { Box::from_raw(cfg) });
    }
}

/// Identification check for the configured model and margins. Writes the
/// free-parameter count, the margin budget and 1/0 for identified into the
/// out-pointers.
///
/// # Safety
/// `cfg` must be a live handle; out-pointers must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn mdam_identify(
    cfg: *const MdamConfig,
    free_parameters: *mut i32,
    margin_budget: *mut i32,
    identified: *mut i32,
) -> i32 {
    if cfg.is_null() {
        set_error("null config handle");
        return MDAM_ERR_ARGUMENT;
    }
    let cfg = unsafe { &(*cfg).cfg };
    let inner = || -> Result<(usize, usize, bool), Error> {
        let schema = cfg.build_schema()?;
        let (spec, _) = cfg.build_spec(&schema)?;
        // Use the dataset's missingness pattern when data is configured,
        // otherwise fall back to the schema's declared structure.
        let summary = match &cfg.data {
            Some(d) => {
                let opts = cfg.load_options()?;
                let data =
                    mdam_core::data::load_dataset(cfg.resolve(&d.path), schema.clone(), &opts)?;
                MissingnessSummary::from_dataset(&data)
            }
            None => MissingnessSummary::worst_case(&schema),
        };
        let margins = cfg.build_margins(&schema, None)?;
        let rep = count_identification(&spec, &schema, &margins, &summary);
        Ok((
            rep.free_parameter_count,
            rep.margin_budget,
            rep.verdict == Verdict::Identified,
        ))
    };
    match inner() {
        Ok((fp, mb, ident)) => {
            unsafe {
                if !free_parameters.is_null() {
                    *free_parameters = fp as i32;
                }
                if !margin_budget.is_null() {
                    *margin_budget = mb as i32;
                }
                if !identified.is_null() {
                    *identified = i32::from(ident);
                }
            }
            MDAM_OK
        }
        Err(e) => fail(e),
    }
}

/// Run the configured simulation, writing dataset, truth and estimand files
/// into `out_dir`.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a valid string pointer.
#[no_mangle]
pub unsafe extern "C" fn mdam_simulate(
    cfg: *const MdamConfig,
    out_dir: *const c_char,
    seed: u64,
) -> i32 {
    if cfg.is_null() {
        set_error("null config handle");
        return MDAM_ERR_ARGUMENT;
    }
    let handle = unsafe { &*cfg };
    let Ok(out) = (unsafe { cstr(out_dir) }) else {
        return MDAM_ERR_ARGUMENT;
    };
    let seed = if seed == MDAM_SEED_FROM_CONFIG {
        handle.cfg.chain.seed
    } else {
        seed
    };
    match cmd_simulate(&handle.cfg, Some(&handle.path), Path::new(out), seed) {
        Ok(()) => MDAM_OK,
        Err(e) => fail(e),
    }
}

/// Fit the configured model, writing draws and reports into `out_dir`.
/// `seed = MDAM_SEED_FROM_CONFIG` and `chains = 0` defer to the config;
/// nonzero `force` fits past an overparameterized identification verdict.
/// Returns null on failure.
///
/// # Safety
/// `cfg` must be a live handle; `out_dir` a valid string pointer.
#[no_mangle]
pub unsafe extern "C" fn mdam_fit_run(
    cfg: *const MdamConfig,
    out_dir: *const c_char,
    seed: u64,
    chains: u32,
    force: i32,
) -> *mut MdamFit {
    if cfg.is_null() {
        set_error("null config handle");
        return std::ptr::null_mut();
    }
    let handle = unsafe { &*cfg };
    let Ok(out) = (unsafe { cstr(out_dir) }) else {
        return std::ptr::null_mut();
    };
    let overrides = FitOverrides {
        seed: (seed != MDAM_SEED_FROM_CONFIG).then_some(seed),
        chains: (chains > 0).then_some(chains as usize),
        iterations: None,
        burn_in: None,
        force: force != 0,
    };
    match cmd_fit(&handle.cfg, Some(&handle.path), Path::new(out), &overrides) {
        Ok(fit) => Box::into_raw(Box::new(MdamFit { fit })),
        Err(e) => {
            set_error(&e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `fit` must be a pointer from `mdam_fit_run`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdam_fit_free(fit: *mut MdamFit) {
    if !fit.is_null() {
        drop(unsafe { Box::from_raw(fit) });
    }
}

/// Total retained draws across chains.
///
/// # Safety
/// `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdam_fit_num_draws(fit: *const MdamFit) -> usize {
    if fit.is_null() {
        return 0;
    }
    unsafe { &*fit }.fit.chains.iter().map(|c| c.draws.len()).sum()
}

/// Monotone-pattern violations observed across retained draws (always 0 for
/// a valid fit).
///
/// # Safety
/// `fit` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdam_fit_monotone_violations(
    fit: *const MdamFit,
    out: *mut u64,
) -> i32 {
    if fit.is_null() || out.is_null() {
        set_error("null argument");
        return MDAM_ERR_ARGUMENT;
    }
    let total = unsafe { &*fit }
        .fit
        .chains
        .iter()
        .map(|c| c.monotone_violations)
        .sum();
    unsafe { *out = total };
    MDAM_OK
}

/// Posterior mean and central 95% interval for `target` (e.g. "vote=1")
/// within `subgroup` (e.g. "state=FL & sex=F"; empty string for all
/// records).
///
/// # Safety
/// `fit` must be a live handle; strings valid; out-pointers writable.
#[no_mangle]
pub unsafe extern "C" fn mdam_fit_estimand(
    fit: *const MdamFit,
    target: *const c_char,
    subgroup: *const c_char,
    mean: *mut f64,
    lo: *mut f64,
    hi: *mut f64,
) -> i32 {
    if fit.is_null() {
        set_error("null fit handle");
        return MDAM_ERR_ARGUMENT;
    }
    let fit = unsafe { &(*fit).fit };
    let Ok(target) = (unsafe { cstr(target) }) else {
        return MDAM_ERR_ARGUMENT;
    };
    let Ok(subgroup) = (unsafe { cstr(subgroup) }) else {
        return MDAM_ERR_ARGUMENT;
    };
    let inner = || -> Result<(f64, f64, f64), Error> {
        let t = parse_target(target, &fit.schema)?;
        let p = Predicate::parse(subgroup, &fit.schema)?;
        let s = estimand_summary(&fit.chains, &fit.schema, t, &p, target)?;
        Ok((s.mean, s.lo, s.hi))
    };
    match inner() {
        Ok((m, l, h)) => {
            unsafe {
                if !mean.is_null() {
                    *mean = m;
                }
                if !lo.is_null() {
                    *lo = l;
                }
                if !hi.is_null() {
                    *hi = h;
                }
            }
            MDAM_OK
        }
        Err(e) => fail(e),
    }
}

/// Posterior mean of a named coefficient (names as in the draws file
/// header, e.g. "U:age=30-49").
///
/// # Safety
/// `fit` must be a live handle; `name` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mdam_fit_coeff_mean(
    fit: *const MdamFit,
    name: *const c_char,
    out: *mut f64,
) -> i32 {
    if fit.is_null() || out.is_null() {
        set_error("null argument");
        return MDAM_ERR_ARGUMENT;
    }
    let fit = unsafe { &(*fit).fit };
    let Ok(name) = (unsafe { cstr(name) }) else {
        return MDAM_ERR_ARGUMENT;
    };
    let mut values = Vec::new();
    for c in &fit.chains {
        match c.coeff_draws(name) {
            Some(v) => values.extend(v),
            None => {
                set_error(&format!("unknown coefficient '{name}'"));
                return MDAM_ERR_ARGUMENT;
            }
        }
    }
    unsafe { *out = mdam_core::numeric::mean(&values) };
    MDAM_OK
}
