//! C ABI over the simulator.
//!
//! Objects cross the boundary as opaque handles. Each constructor has a
//! matching `_free`. Every fallible call returns an [`LdpStatus`]; on failure
//! [`ldp_last_error`] describes what went wrong on the calling thread.
//! Strings handed out by the library are freed with [`ldp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ldp_core::models::Models;
use ldp_core::scenarios;
use ldp_core::sim::{simulate, trajectory_to_csv, Scenario, Simulation, DEFAULT_DT};
use ldp_core::skeleton::{evaluate_metrics, poses_from_csv, PoseMetrics, SkeletonTopology};
use ldp_core::Error;

/// Result of every fallible call. The numeric values of the first four
/// match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdpStatus {
    Ok = 0,
    Validation = 1,
    Numerical = 2,
    Io = 3,
    NullPointer = 4,
    InvalidUtf8 = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// A parsed, validated scenario.
pub struct LdpScenario(Scenario);

/// A finished rollout, possibly cut short by a numerical failure.
pub struct LdpSimulation(Simulation);

/// Pose error metrics of one comparison.
pub struct LdpMetrics(PoseMetrics);

/// Plain copy of the metric values.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LdpMetricValues {
    /// Meters.
    pub mpjpe: f64,
    pub hip_ade: f64,
    pub hip_fde: f64,
    pub mble: f64,
    /// Centimeters per frame.
    pub fse: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: LdpStatus, msg: impl Into<String>) -> LdpStatus {
    set_error(msg.into());
    status
}

fn from_error(e: &Error) -> LdpStatus {
    let status = match e.exit_code() {
        1 => LdpStatus::Validation,
        3 => LdpStatus::Io,
        _ => LdpStatus::Numerical,
    };
    fail(status, e.to_string())
}

/// Run `f`, turning panics into [`LdpStatus::Panic`].
fn guard(f: impl FnOnce() -> LdpStatus) -> LdpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(LdpStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, LdpStatus> {
    if p.is_null() {
        return Err(fail(LdpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LdpStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn ldp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn ldp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ldp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a scenario from TOML text.
///
/// # Safety
/// `toml` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldp_scenario_from_toml(
    toml: *const c_char,
    out: *mut *mut LdpScenario,
) -> LdpStatus {
    guard(|| {
        if out.is_null() {
            return fail(LdpStatus::NullPointer, "out is null");
        }
        let text = match str_arg(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::parse(text, "<ffi>", &[]) {
            Ok(s) => {
                put(out, LdpScenario(s));
                LdpStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// One of the bundled scenarios by name.
///
/// # Safety
/// `name` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldp_scenario_bundled(
    name: *const c_char,
    out: *mut *mut LdpScenario,
) -> LdpStatus {
    guard(|| {
        if out.is_null() {
            return fail(LdpStatus::NullPointer, "out is null");
        }
        let name = match str_arg(name, "name") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match scenarios::bundled(name) {
            Some(s) => {
                put(out, LdpScenario(s));
                LdpStatus::Ok
            }
            None => fail(
                LdpStatus::Validation,
                format!("no bundled scenario `{name}`"),
            ),
        }
    })
}

/// Number of agents, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_scenario_agent_count(scenario: *const LdpScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.0.agents.len())
}

/// # Safety
/// `scenario` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldp_scenario_free(scenario: *mut LdpScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Roll out `scenario` with fresh models drawn from `seed`.
///
/// A numerical failure during the rollout still yields a simulation holding
/// the completed frames; the status is then [`LdpStatus::Numerical`].
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldp_simulate(
    scenario: *const LdpScenario,
    seed: u64,
    out: *mut *mut LdpSimulation,
) -> LdpStatus {
    guard(|| {
        let Some(s) = scenario.as_ref() else {
            return fail(LdpStatus::NullPointer, "scenario is null");
        };
        if out.is_null() {
            return fail(LdpStatus::NullPointer, "out is null");
        }
        match simulate(&s.0, &Models::new(seed)) {
            Ok(sim) => {
                let status = match &sim.failure {
                    Some(e) => from_error(e),
                    None => LdpStatus::Ok,
                };
                put(out, LdpSimulation(sim));
                status
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Number of recorded frames, or 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_simulation_frames(sim: *const LdpSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.0.trajectory.len())
}

/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_simulation_agents(sim: *const LdpSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.0.trajectory.agents())
}

/// Copy `[x, y, θ, φ, ẋ, ẏ, θ̇, φ̇]` of one agent at one frame into `out`.
///
/// # Safety
/// `sim` must be a live handle; `out` must point to 8 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ldp_simulation_state(
    sim: *const LdpSimulation,
    frame: usize,
    agent: usize,
    out: *mut f64,
) -> LdpStatus {
    guard(|| {
        let Some(s) = sim.as_ref() else {
            return fail(LdpStatus::NullPointer, "sim is null");
        };
        if out.is_null() {
            return fail(LdpStatus::NullPointer, "out is null");
        }
        let Some(r) = s.0.trajectory.frames.get(frame).and_then(|f| f.get(agent)) else {
            return fail(
                LdpStatus::OutOfRange,
                format!("frame {frame} agent {agent} out of range"),
            );
        };
        let values: Vec<f64> = r
            .state
            .to_array()
            .into_iter()
            .chain(r.vel.to_array())
            .collect();
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        LdpStatus::Ok
    })
}

/// The trajectory in the command-line CSV format. Free with
/// [`ldp_string_free`]. Null on failure.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ldp_simulation_to_csv(sim: *const LdpSimulation) -> *mut c_char {
    let Some(s) = sim.as_ref() else {
        set_error("sim is null".into());
        return ptr::null_mut();
    };
    match CString::new(trajectory_to_csv(&s.0.trajectory)) {
        Ok(c) => c.into_raw(),
        Err(_) => ptr::null_mut(),
    }
}

/// # Safety
/// `sim` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldp_simulation_free(sim: *mut LdpSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Compare two pose CSV texts (`frame,agent,joint,x,y,z`) with the default
/// skeleton. `foot_height` is in meters.
///
/// # Safety
/// Both texts must be valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldp_metrics_evaluate(
    pred_csv: *const c_char,
    gt_csv: *const c_char,
    foot_height: f64,
    out: *mut *mut LdpMetrics,
) -> LdpStatus {
    guard(|| {
        if out.is_null() {
            return fail(LdpStatus::NullPointer, "out is null");
        }
        let (pred, gt) = match (str_arg(pred_csv, "pred_csv"), str_arg(gt_csv, "gt_csv")) {
            (Ok(p), Ok(g)) => (p, g),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let result = poses_from_csv(pred.as_bytes(), "pred", DEFAULT_DT)
            .and_then(|p| Ok((p, poses_from_csv(gt.as_bytes(), "gt", DEFAULT_DT)?)))
            .and_then(|(p, g)| evaluate_metrics(&p, &g, &SkeletonTopology::default(), foot_height));
        match result {
            Ok(m) => {
                put(out, LdpMetrics(m));
                LdpStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `metrics` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ldp_metrics_values(
    metrics: *const LdpMetrics,
    out: *mut LdpMetricValues,
) -> LdpStatus {
    guard(|| {
        let (Some(m), false) = (metrics.as_ref(), out.is_null()) else {
            return fail(LdpStatus::NullPointer, "null argument");
        };
        *out = LdpMetricValues {
            mpjpe: m.0.mpjpe,
            hip_ade: m.0.hip_ade,
            hip_fde: m.0.hip_fde,
            mble: m.0.mble,
            fse: m.0.fse,
        };
        LdpStatus::Ok
    })
}

/// # Safety
/// `metrics` must be null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ldp_metrics_free(metrics: *mut LdpMetrics) {
    if !metrics.is_null() {
        drop(Box::from_raw(metrics));
    }
}
