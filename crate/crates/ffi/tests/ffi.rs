use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use ldp_core::ipm::IpmState;
use ldp_core::skeleton::{pose_from_ipm, poses_to_csv, PoseTrajectory, SkeletonTopology};
use ldp_ffi::*;

fn last_error() -> String {
    let p = ldp_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn bundled(name: &str) -> *mut LdpScenario {
    let name = CString::new(name).unwrap();
    let mut sc = ptr::null_mut();
    assert_eq!(
        unsafe { ldp_scenario_bundled(name.as_ptr(), &mut sc) },
        LdpStatus::Ok
    );
    sc
}

#[test]
fn simulate_bundled_scenario() {
    let sc = bundled("single_strong");
    assert_eq!(unsafe { ldp_scenario_agent_count(sc) }, 1);
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { ldp_simulate(sc, 0, &mut sim) }, LdpStatus::Ok);
    let frames = unsafe { ldp_simulation_frames(sim) };
    assert_eq!(frames, 181);
    assert_eq!(unsafe { ldp_simulation_agents(sim) }, 1);

    let mut row = [f64::NAN; 8];
    assert_eq!(
        unsafe { ldp_simulation_state(sim, frames - 1, 0, row.as_mut_ptr()) },
        LdpStatus::Ok
    );
    assert!(row.iter().all(|v| v.is_finite()));
    assert_eq!(
        unsafe { ldp_simulation_state(sim, frames, 0, row.as_mut_ptr()) },
        LdpStatus::OutOfRange
    );
    assert!(last_error().contains("out of range"));

    let csv = unsafe { ldp_simulation_to_csv(sim) };
    assert!(!csv.is_null());
    let text = unsafe { CStr::from_ptr(csv) }.to_str().unwrap().to_owned();
    assert_eq!(text.lines().count(), frames + 1);
    unsafe {
        ldp_string_free(csv);
        ldp_simulation_free(sim);
        ldp_scenario_free(sc);
    }
}

#[test]
fn simulation_is_deterministic_across_calls() {
    let run = || unsafe {
        let sc = bundled("line10");
        let mut sim = ptr::null_mut();
        assert_eq!(ldp_simulate(sc, 7, &mut sim), LdpStatus::Ok);
        let csv = ldp_simulation_to_csv(sim);
        let text = CStr::from_ptr(csv).to_bytes().to_vec();
        ldp_string_free(csv);
        ldp_simulation_free(sim);
        ldp_scenario_free(sc);
        text
    };
    assert_eq!(run(), run());
}

#[test]
fn invalid_scenario_reports_validation() {
    let toml = CString::new("dt = -1.0\n[[agents]]\nid = 0\n").unwrap();
    let mut sc = ptr::null_mut();
    let status = unsafe { ldp_scenario_from_toml(toml.as_ptr(), &mut sc) };
    assert_eq!(status, LdpStatus::Validation);
    assert!(sc.is_null());
    assert!(!last_error().is_empty());

    let name = CString::new("nope").unwrap();
    assert_eq!(
        unsafe { ldp_scenario_bundled(name.as_ptr(), &mut sc) },
        LdpStatus::Validation
    );
    assert!(last_error().contains("nope"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut sc = ptr::null_mut();
    assert_eq!(
        unsafe { ldp_scenario_from_toml(ptr::null(), &mut sc) },
        LdpStatus::NullPointer
    );
    assert_eq!(
        unsafe { ldp_simulate(ptr::null(), 0, ptr::null_mut()) },
        LdpStatus::NullPointer
    );
    assert_eq!(unsafe { ldp_scenario_agent_count(ptr::null()) }, 0);
    assert!(unsafe { ldp_simulation_to_csv(ptr::null()) }.is_null());
    unsafe {
        ldp_scenario_free(ptr::null_mut());
        ldp_simulation_free(ptr::null_mut());
        ldp_metrics_free(ptr::null_mut());
        ldp_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_rejected() {
    let bad = [0xffu8, 0xfe, 0];
    let mut sc = ptr::null_mut();
    let status = unsafe { ldp_scenario_from_toml(bad.as_ptr().cast(), &mut sc) };
    assert_eq!(status, LdpStatus::InvalidUtf8);
}

#[test]
fn success_clears_last_error() {
    let name = CString::new("nope").unwrap();
    let mut sc = ptr::null_mut();
    unsafe { ldp_scenario_bundled(name.as_ptr(), &mut sc) };
    assert!(!ldp_last_error().is_null());
    let sc = bundled("single_weak");
    assert!(ldp_last_error().is_null());
    unsafe { ldp_scenario_free(sc) };
}

fn pose_csv(offset: f64) -> CString {
    let topo = SkeletonTopology::default();
    let frames = (0..5)
        .map(|t| {
            let s = IpmState {
                x: 0.01 * t as f64 + offset,
                y: 0.0,
                theta: 0.05,
                phi: -0.02,
            };
            vec![pose_from_ipm(&s, 0.9, 0.0, &topo, 0.2)]
        })
        .collect();
    let traj = PoseTrajectory {
        dt: 1.0 / 60.0,
        agent_ids: vec![0],
        frames,
    };
    CString::new(poses_to_csv(&traj)).unwrap()
}

#[test]
fn metrics_of_shifted_poses() {
    let (a, b) = (pose_csv(0.0), pose_csv(0.1));
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { ldp_metrics_evaluate(a.as_ptr(), b.as_ptr(), 0.05, &mut m) },
        LdpStatus::Ok
    );
    let mut v = LdpMetricValues::default();
    assert_eq!(unsafe { ldp_metrics_values(m, &mut v) }, LdpStatus::Ok);
    assert!((v.mpjpe - 0.1).abs() < 1e-9, "{v:?}");
    assert!((v.hip_ade - 0.1).abs() < 1e-9);
    assert!((v.hip_fde - 0.1).abs() < 1e-9);
    assert!(v.mble.abs() < 1e-9);
    unsafe { ldp_metrics_free(m) };

    let garbage = CString::new("frame,agent\n1,2,3\n").unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { ldp_metrics_evaluate(garbage.as_ptr(), b.as_ptr(), 0.05, &mut m) };
    assert_ne!(status, LdpStatus::Ok);
    assert!(last_error().contains("pred"));
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ldp_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/ldp.h");
    std::fs::read_to_string(path).expect("header generated by build script")
}

#[test]
fn header_declares_every_export() {
    let h = header();
    for sym in [
        "ldp_last_error",
        "ldp_version",
        "ldp_string_free",
        "ldp_scenario_from_toml",
        "ldp_scenario_bundled",
        "ldp_scenario_agent_count",
        "ldp_scenario_free",
        "ldp_simulate",
        "ldp_simulation_frames",
        "ldp_simulation_agents",
        "ldp_simulation_state",
        "ldp_simulation_to_csv",
        "ldp_simulation_free",
        "ldp_metrics_evaluate",
        "ldp_metrics_values",
        "ldp_metrics_free",
        "typedef struct LdpScenario LdpScenario",
        "LDP_STATUS_NUMERICAL = 2",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

/// Compile and run a small C program against the header and static library.
#[test]
fn c_program_links_against_static_library() {
    let deps = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = deps.parent().unwrap().join("libldp_ffi.a");
    if !lib.exists() {
        eprintln!("static library not found at {}; skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "ldp.h"
int main(void) {
    LdpScenario *sc = NULL;
    if (ldp_scenario_bundled("single_weak", &sc) != LDP_STATUS_OK) return 10;
    LdpSimulation *sim = NULL;
    if (ldp_simulate(sc, 0, &sim) != LDP_STATUS_OK) return 11;
    double row[8];
    if (ldp_simulation_state(sim, 0, 0, row) != LDP_STATUS_OK) return 12;
    printf("%zu %zu\n", ldp_simulation_frames(sim), ldp_simulation_agents(sim));
    ldp_simulation_free(sim);
    ldp_scenario_free(sc);
    if (ldp_scenario_bundled("missing", &sc) != LDP_STATUS_VALIDATION) return 13;
    return ldp_last_error() == NULL ? 14 : 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status();
    let Ok(status) = status else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(
        out.status.success(),
        "C program exited with {:?}",
        out.status
    );
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "181 1");
}
