//! C interface to the solver: build a simulation from TOML text or a preset, step it,
//! and copy fields out. Every call returns a [`PdStatus`]; on failure the message is
//! available from [`pd_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use pd_core::app::{self, Overrides, Simulation};
use pd_core::PdError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8 or a buffer of the wrong size.
    InvalidArgument = 1,
    ConfigError = 2,
    Instability = 3,
    IoError = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

/// Opaque handle owning one simulation.
pub struct PdSimulation {
    inner: Simulation,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn fail(status: PdStatus, message: &str) -> PdStatus {
    set_error(message);
    status
}

fn from_error(e: &PdError) -> PdStatus {
    let status = match e.exit_code() {
        3 => PdStatus::Instability,
        4 => PdStatus::IoError,
        _ => PdStatus::ConfigError,
    };
    fail(status, &e.to_string())
}

fn guard(f: impl FnOnce() -> PdStatus) -> PdStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(PdStatus::Internal, "panic inside the solver"))
}

unsafe fn read_str<'a>(text: *const c_char, what: &str) -> Result<&'a str, PdStatus> {
    if text.is_null() {
        return Err(fail(PdStatus::InvalidArgument, &format!("{what} is null")));
    }
    CStr::from_ptr(text)
        .to_str()
        .map_err(|_| fail(PdStatus::InvalidArgument, &format!("{what} is not UTF-8")))
}

fn create(config: pd_core::Result<app::SimulationConfig>, out: *mut *mut PdSimulation) -> PdStatus {
    match config.and_then(Simulation::new) {
        Ok(inner) => {
            unsafe { *out = Box::into_raw(Box::new(PdSimulation { inner })) };
            PdStatus::Ok
        }
        Err(e) => from_error(&e),
    }
}

/// Message of the most recent failure on this thread. The pointer stays valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a simulation from TOML configuration text.
///
/// # Safety
/// `config_text` must be a nul-terminated string and `out` a valid place for a pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_from_config(
    config_text: *const c_char,
    full_scale: bool,
    out: *mut *mut PdSimulation,
) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return fail(PdStatus::InvalidArgument, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(config_text, "config_text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        create(app::parse_config(text, full_scale, &Overrides::default()), out)
    })
}

/// Builds a simulation from a built-in scenario (`plate2d`, `block3d` or `crack2d`).
///
/// # Safety
/// `name` must be a nul-terminated string and `out` a valid place for a pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_from_preset(
    name: *const c_char,
    full_scale: bool,
    out: *mut *mut PdSimulation,
) -> PdStatus {
    guard(|| {
        if out.is_null() {
            return fail(PdStatus::InvalidArgument, "out is null");
        }
        *out = ptr::null_mut();
        let name = match read_str(name, "name") {
            Ok(t) => t,
            Err(s) => return s,
        };
        create(app::preset_config(name, full_scale, &Overrides::default()), out)
    })
}

/// Releases a simulation. Null is ignored.
///
/// # Safety
/// `sim` must come from one of the constructors and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_free(sim: *mut PdSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Takes up to `steps` steps, stopping at the configured step count. The number taken is
/// stored in `taken` when it is not null.
///
/// # Safety
/// `sim` must be a live handle; `taken` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_advance(sim: *mut PdSimulation, steps: usize, taken: *mut usize) -> PdStatus {
    guard(|| {
        let Some(sim) = sim.as_mut() else {
            return fail(PdStatus::InvalidArgument, "sim is null");
        };
        let before = sim.inner.steps_done();
        let result = sim.inner.advance(steps);
        if !taken.is_null() {
            *taken = sim.inner.steps_done() - before;
        }
        match result {
            Ok(_) => PdStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

/// Runs all remaining steps.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_run(sim: *mut PdSimulation) -> PdStatus {
    pd_simulation_advance(sim, usize::MAX, ptr::null_mut())
}

/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_point_count(sim: *const PdSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.inner.model().len())
}

/// Spatial dimension (2 or 3); 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_dim(sim: *const PdSimulation) -> u32 {
    sim.as_ref().map_or(0, |s| s.inner.model().cloud().dim().count() as u32)
}

/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_time(sim: *const PdSimulation) -> f64 {
    sim.as_ref().map_or(0.0, |s| s.inner.time())
}

/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_steps_done(sim: *const PdSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.inner.steps_done())
}

unsafe fn copy_out(sim: *const PdSimulation, out: *mut f64, len: usize, fill: impl Fn(&Simulation) -> Vec<f64>) -> PdStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(PdStatus::InvalidArgument, "sim is null");
        };
        if out.is_null() {
            return fail(PdStatus::InvalidArgument, "out is null");
        }
        let values = fill(&sim.inner);
        if values.len() != len {
            return fail(PdStatus::InvalidArgument, &format!("buffer holds {len} values, need {}", values.len()));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&values);
        PdStatus::Ok
    })
}

/// Copies displacements, `dim` values per point, into `out` of length `len`.
///
/// # Safety
/// `sim` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_copy_displacement(sim: *const PdSimulation, out: *mut f64, len: usize) -> PdStatus {
    copy_out(sim, out, len, |s| {
        let dims = s.model().cloud().dim().count();
        s.state().u.iter().flat_map(|u| u.iter().take(dims).copied().collect::<Vec<_>>()).collect()
    })
}

/// Copies the damage index of every point into `out` of length `len`.
///
/// # Safety
/// `sim` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pd_simulation_copy_damage(sim: *const PdSimulation, out: *mut f64, len: usize) -> PdStatus {
    copy_out(sim, out, len, |s| s.damage())
}
