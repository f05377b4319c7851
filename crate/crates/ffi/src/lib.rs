//! C ABI over `benard-mix`.
//!
//! Every call returns a [`BmixStatus`]. Objects cross the boundary as opaque
//! handles that the caller frees with the matching `*_free`. After a failed
//! call, `bmix_last_error` describes what went wrong on that thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use benard_mix::config::{InitSpec, RunConfig};
use benard_mix::experiment::{initial_state, run_experiment, ExperimentKind, Setup};
use benard_mix::markov::ChainState;
use benard_mix::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BmixStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    InvalidArgument = 4,
    Numerical = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Validated run configuration.
pub struct BmixConfig(RunConfig);

/// One chain of the time-one map, with its stepper and noise basis.
pub struct BmixSimulator {
    cfg: RunConfig,
    setup: Setup,
    state: ChainState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> BmixStatus {
    match err {
        Error::Config(_) | Error::InvalidGrid(_) => BmixStatus::Config,
        Error::InvalidArgument(_) | Error::GridMismatch(_) | Error::SizeMismatch { .. } => BmixStatus::InvalidArgument,
        Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => BmixStatus::Io,
        Error::Cfl { .. } | Error::NonFinite(_) | Error::RankDeficient { .. } | Error::NoConvergence(_) => {
            BmixStatus::Numerical
        }
    }
}

/// Runs `f`, recording its error and catching panics.
fn guard(f: impl FnOnce() -> Result<(), (BmixStatus, String)>) -> BmixStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BmixStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside benard-mix");
            BmixStatus::Panic
        }
    }
}

fn lib(err: Error) -> (BmixStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (BmixStatus, String) {
    (BmixStatus::NullPointer, format!("{what} is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (BmixStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (BmixStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message for the last failed call on this thread. Owned by the library;
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bmix_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bmix_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn bmix_config_default(out: *mut *mut BmixConfig) -> BmixStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(BmixConfig(RunConfig::default())));
        Ok(())
    })
}

/// Parses and validates TOML configuration text.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn bmix_config_parse(toml: *const c_char, out: *mut *mut BmixConfig) -> BmixStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::parse(text(toml, "toml")?).map_err(lib)?;
        *out = Box::into_raw(Box::new(BmixConfig(cfg)));
        Ok(())
    })
}

/// Hex hash of the configuration; free with `bmix_string_free`.
///
/// # Safety
/// `cfg` must be a live handle; `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn bmix_config_hash(cfg: *const BmixConfig, out: *mut *mut c_char) -> BmixStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = owned_string(cfg.0.hash());
        Ok(())
    })
}

/// Overrides the noise seed.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmix_config_set_seed(cfg: *mut BmixConfig, seed: u64) -> BmixStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        cfg.0.noise.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bmix_config_free(cfg: *mut BmixConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs an experiment by name (`simulate`, `mix`, `control`, `adjoint-check`,
/// `stokes-validate`, `noise-validate`, `dissipativity`). `out_dir` may be
/// null; otherwise artifacts are written there. The report JSON goes to
/// `report_json` (free with `bmix_string_free`) and the gate result to
/// `passed`.
///
/// # Safety
/// `cfg` must be a live handle, `kind` and a non-null `out_dir` NUL-terminated
/// strings, and `report_json`, `passed` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bmix_run_experiment(
    cfg: *const BmixConfig,
    kind: *const c_char,
    out_dir: *const c_char,
    report_json: *mut *mut c_char,
    passed: *mut bool,
) -> BmixStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if report_json.is_null() || passed.is_null() {
            return Err(null("output pointer"));
        }
        let name = text(kind, "kind")?;
        let kind: ExperimentKind =
            name.parse().map_err(|_| (BmixStatus::InvalidArgument, format!("unknown experiment `{name}`")))?;
        let dir = if out_dir.is_null() { None } else { Some(Path::new(text(out_dir, "out_dir")?)) };
        let report = run_experiment(kind, &cfg.0, dir).map_err(lib)?;
        *report_json = owned_string(report.to_json());
        *passed = report.passed;
        Ok(())
    })
}

/// Creates a chain started from `init` (`conduction`, `random:R` or
/// `checkpoint:PATH`; null means conduction).
///
/// # Safety
/// `cfg` must be a live handle, `init` null or NUL-terminated, `out` valid
/// for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_new(
    cfg: *const BmixConfig,
    init: *const c_char,
    out: *mut *mut BmixSimulator,
) -> BmixStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?.0.clone();
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = if init.is_null() { "conduction" } else { text(init, "init")? };
        let spec = InitSpec::parse(spec).map_err(|e| (BmixStatus::InvalidArgument, e))?;
        cfg.validate().map_err(lib)?;
        let setup = Setup::new(&cfg).map_err(lib)?;
        let state = initial_state(&setup, &spec, cfg.noise.seed, 0).map_err(lib)?;
        *out = Box::into_raw(Box::new(BmixSimulator { cfg, setup, state }));
        Ok(())
    })
}

/// Advances the chain by `units` unit time intervals.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_advance(sim: *mut BmixSimulator, units: u64) -> BmixStatus {
    guard(|| {
        let sim = sim.as_mut().ok_or_else(|| null("sim"))?;
        let mc = sim.setup.chain(&sim.cfg).map_err(lib)?;
        let mut s = sim.state.clone();
        for _ in 0..units {
            s = mc.advance_chain(&s).map_err(lib)?;
        }
        sim.state = s;
        Ok(())
    })
}

/// Number of completed unit steps.
///
/// # Safety
/// `sim` must be a live handle; `k` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_step_index(sim: *const BmixSimulator, k: *mut u64) -> BmixStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if k.is_null() {
            return Err(null("k"));
        }
        *k = sim.state.k;
        Ok(())
    })
}

/// Grid shape: `n1`, `n2` and the number of planes `n3 + 1`.
///
/// # Safety
/// `sim` must be a live handle; the outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_shape(
    sim: *const BmixSimulator,
    n1: *mut usize,
    n2: *mut usize,
    planes: *mut usize,
) -> BmixStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if n1.is_null() || n2.is_null() || planes.is_null() {
            return Err(null("output pointer"));
        }
        let g = &sim.setup.grid;
        *n1 = g.n1();
        *n2 = g.n2();
        *planes = g.planes();
        Ok(())
    })
}

/// Copies the temperature into `buf`, plane by plane, `x1` fastest:
/// `buf[(j * n2 + i2) * n1 + i1]`.
///
/// # Safety
/// `sim` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_temperature(sim: *const BmixSimulator, buf: *mut f64, len: usize) -> BmixStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let t = sim.state.temperature(&sim.setup.stepper);
        let v = t.values();
        if len < v.len() {
            return Err((BmixStatus::BufferTooSmall, format!("need {} values, got {len}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// H1 norm of the perturbation from conduction.
///
/// # Safety
/// `sim` must be a live handle; `norm` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_h1_norm(sim: *const BmixSimulator, norm: *mut f64) -> BmixStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if norm.is_null() {
            return Err(null("norm"));
        }
        *norm = sim.setup.chain(&sim.cfg).map_err(lib)?.h1_norm(&sim.state);
        Ok(())
    })
}

/// # Safety
/// `sim` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bmix_simulator_free(sim: *mut BmixSimulator) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
