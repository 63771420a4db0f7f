//! C ABI for the roundabout simulator.
//!
//! Usage from C: create a handle from a TOML scenario (or the defaults), run
//! it, read the summary JSON / trajectory CSV as strings, and free everything
//! through the matching `rb_*_free` calls. All functions are
//! null-pointer-safe and never unwind across the boundary; failures set a
//! thread-local message readable via `rb_last_error_message`.
//!
//! Entry points take raw pointers but validate them before use, so they are
//! deliberately not declared `unsafe` (callers uphold only the usual C
//! contract: pointers are either null or valid for the call).
#![allow(clippy::not_unsafe_ptr_arg_deref)]

use libc::c_char;
use roundabout::config::ScenarioConfig;
use roundabout::output::{trajectory_csv, SummaryDocument};
use roundabout::sim::{run, RunResult};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Status codes returned by fallible entry points.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RbStatus {
    RbOk = 0,
    RbErrNullArg = 1,
    RbErrUtf8 = 2,
    RbErrConfig = 3,
    RbErrRuntime = 4,
    RbErrNotRun = 5,
}

/// Opaque simulation handle.
pub struct RbSimulation {
    cfg: ScenarioConfig,
    result: Option<RunResult>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Returns the last error message on this thread as a newly allocated string,
/// or null if none. Free with `rb_string_free`.
#[no_mangle]
pub extern "C" fn rb_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => std::ptr::null_mut(),
    })
}

/// Creates a simulation from a TOML scenario document. Missing keys take
/// their defaults; unknown keys are rejected. Returns null on error.
#[no_mangle]
pub extern "C" fn rb_simulation_new_from_toml(config_toml: *const c_char) -> *mut RbSimulation {
    clear_error();
    if config_toml.is_null() {
        set_error("config_toml is null");
        return std::ptr::null_mut();
    }
    let text = match unsafe { CStr::from_ptr(config_toml) }.to_str() {
        Ok(t) => t,
        Err(_) => {
            set_error("config_toml is not valid UTF-8");
            return std::ptr::null_mut();
        }
    };
    match ScenarioConfig::from_toml(text) {
        Ok(cfg) => Box::into_raw(Box::new(RbSimulation { cfg, result: None })),
        Err(e) => {
            set_error(e.to_string());
            std::ptr::null_mut()
        }
    }
}

/// Creates a simulation with the default scenario.
#[no_mangle]
pub extern "C" fn rb_simulation_new_default() -> *mut RbSimulation {
    clear_error();
    Box::into_raw(Box::new(RbSimulation { cfg: ScenarioConfig::default(), result: None }))
}

/// Runs the simulation to completion. Idempotent: a second call reruns and
/// replaces the stored result.
#[no_mangle]
pub extern "C" fn rb_simulation_run(sim: *mut RbSimulation) -> RbStatus {
    clear_error();
    let Some(sim) = (unsafe { sim.as_mut() }) else {
        set_error("sim is null");
        return RbStatus::RbErrNullArg;
    };
    let outcome = catch_unwind(AssertUnwindSafe(|| run(&sim.cfg)));
    match outcome {
        Ok(Ok(result)) => {
            sim.result = Some(result);
            RbStatus::RbOk
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            RbStatus::RbErrRuntime
        }
        Err(_) => {
            set_error("simulation panicked");
            RbStatus::RbErrRuntime
        }
    }
}

fn with_result<F: FnOnce(&RunResult) -> String>(
    sim: *const RbSimulation,
    render: F,
) -> *mut c_char {
    clear_error();
    let Some(sim) = (unsafe { sim.as_ref() }) else {
        set_error("sim is null");
        return std::ptr::null_mut();
    };
    let Some(result) = &sim.result else {
        set_error("simulation has not been run");
        return std::ptr::null_mut();
    };
    match CString::new(render(result)) {
        Ok(s) => s.into_raw(),
        Err(_) => {
            set_error("output contained an interior NUL byte");
            std::ptr::null_mut()
        }
    }
}

/// Returns the run summary (with per-trip records) as a JSON string, or null
/// if the simulation has not been run. Free with `rb_string_free`.
#[no_mangle]
pub extern "C" fn rb_simulation_summary_json(sim: *const RbSimulation) -> *mut c_char {
    with_result(sim, |r| {
        let doc = SummaryDocument { summary: r.summary.clone(), trips: r.trips.clone() };
        serde_json::to_string_pretty(&doc).expect("summary serializes")
    })
}

/// Returns the per-step trajectory table as CSV text, or null if the
/// simulation has not been run. Free with `rb_string_free`.
#[no_mangle]
pub extern "C" fn rb_simulation_trajectory_csv(sim: *const RbSimulation) -> *mut c_char {
    with_result(sim, |r| trajectory_csv(&r.log))
}

/// Frees a string returned by this library. Null is a no-op.
#[no_mangle]
pub extern "C" fn rb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Frees a simulation handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn rb_simulation_free(sim: *mut RbSimulation) {
    if !sim.is_null() {
        drop(unsafe { Box::from_raw(sim) });
    }
}
