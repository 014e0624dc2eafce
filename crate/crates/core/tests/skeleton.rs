//! Pose mapping round trips and metric invariants.

use ldp_core::ipm::IpmState;
use ldp_core::skeleton::{
    evaluate_metrics, pose_from_ipm, poses_from_csv, poses_to_csv, skeleton_to_ipm, Pose,
    PoseTrajectory, SkeletonTopology, DEFAULT_FOOT_HEIGHT,
};
use ldp_core::training::mse_pose_loss;
use proptest::prelude::*;

const DT: f64 = 1.0 / 60.0;

fn translated(p: &Pose, d: [f64; 3]) -> Pose {
    p.map(|j| [j[0] + d[0], j[1] + d[1], j[2] + d[2]])
}

fn walk(agents: usize, frames: usize, sway: f64) -> PoseTrajectory {
    let topo = SkeletonTopology::default();
    let frames = (0..frames)
        .map(|t| {
            (0..agents)
                .map(|n| {
                    let s = IpmState {
                        x: n as f64 + 0.02 * t as f64,
                        y: 0.5 * n as f64,
                        theta: sway * (0.3 * t as f64).sin(),
                        phi: -0.5 * sway * (0.2 * t as f64).cos(),
                    };
                    pose_from_ipm(&s, 0.9, 0.1 * n as f64, &topo, 0.25)
                })
                .collect()
        })
        .collect();
    PoseTrajectory {
        dt: DT,
        agent_ids: (0..agents).collect(),
        frames,
    }
}

proptest! {
    #[test]
    fn ipm_pose_round_trip(
        x in -5.0f64..5.0, y in -5.0f64..5.0,
        theta in -1.2f64..1.2, phi in -1.2f64..1.2,
        l in 0.3f64..1.5, yaw in -3.1f64..3.1, stance in 0.0f64..0.5,
    ) {
        let topo = SkeletonTopology::default();
        let s = IpmState { x, y, theta, phi };
        let pose = pose_from_ipm(&s, l, yaw, &topo, stance);
        let (back, l_back) = skeleton_to_ipm(&pose, &topo, yaw, 0.3).unwrap();
        for (a, b) in s.to_array().iter().zip(back.to_array()) {
            prop_assert!((a - b).abs() < 1e-9, "{:?} vs {:?}", s, back);
        }
        prop_assert!((l - l_back).abs() < 1e-9);
    }

    #[test]
    fn rigid_translation_metrics(dx in -2.0f64..2.0, dy in -2.0f64..2.0, dz in -0.5f64..0.5) {
        let topo = SkeletonTopology::default();
        let gt = walk(2, 12, 0.1);
        let mut pred = gt.clone();
        for f in &mut pred.frames {
            for p in f.iter_mut() {
                *p = translated(p, [dx, dy, dz]);
            }
        }
        let m = evaluate_metrics(&pred, &gt, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
        let d = (dx * dx + dy * dy + dz * dz).sqrt();
        prop_assert!((m.mpjpe - d).abs() < 1e-12);
        prop_assert!((m.hip_ade - d).abs() < 1e-12);
        prop_assert!((m.hip_fde - d).abs() < 1e-12);
        prop_assert!(m.mble.abs() < 1e-12);
        let mse = mse_pose_loss(&pred, &gt).unwrap();
        prop_assert!((mse - (dx * dx + dy * dy + dz * dz) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_nonnegative_and_symmetric_in_position_error(sway in 0.0f64..0.3, shift in 0.0f64..0.2) {
        let topo = SkeletonTopology::default();
        let a = walk(3, 10, sway);
        let b = walk(3, 10, sway + shift);
        let ab = evaluate_metrics(&a, &b, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
        let ba = evaluate_metrics(&b, &a, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
        for v in [ab.mpjpe, ab.hip_ade, ab.hip_fde, ab.mble, ab.fse] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
        prop_assert!((ab.mpjpe - ba.mpjpe).abs() < 1e-12);
        prop_assert!((ab.hip_ade - ba.hip_ade).abs() < 1e-12);
    }
}

#[test]
fn identical_trajectories_have_zero_metrics() {
    let topo = SkeletonTopology::default();
    let gt = walk(3, 15, 0.2);
    let m = evaluate_metrics(&gt, &gt, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
    assert_eq!([m.mpjpe, m.hip_ade, m.hip_fde, m.mble], [0.0; 4]);
}

/// Grounded feet that do not move produce no skate, and a horizontal shift
/// of the whole prediction leaves that unchanged.
#[test]
fn static_grounded_feet_do_not_skate() {
    let topo = SkeletonTopology::default();
    let still = IpmState {
        x: 0.3,
        y: -0.2,
        theta: 0.1,
        phi: 0.05,
    };
    let pose = pose_from_ipm(&still, 0.9, 0.4, &topo, 0.3);
    let gt = PoseTrajectory {
        dt: DT,
        agent_ids: vec![0],
        frames: vec![vec![pose]; 20],
    };
    let shifted = PoseTrajectory {
        frames: vec![vec![translated(&pose, [0.7, -0.4, 0.0])]; 20],
        ..gt.clone()
    };
    let base = evaluate_metrics(&gt, &gt, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
    let moved = evaluate_metrics(&shifted, &gt, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
    assert_eq!(base.fse, 0.0);
    assert_eq!(moved.fse, base.fse);
}

#[test]
fn sliding_grounded_feet_skate() {
    let topo = SkeletonTopology::default();
    let gt = walk(1, 20, 0.0);
    let m = evaluate_metrics(&gt, &gt, &topo, DEFAULT_FOOT_HEIGHT).unwrap();
    // Ankles on the ground slide 2 cm per frame with weight 2 − 2⁰ = 1.
    assert!((m.fse - 2.0).abs() < 1e-9, "{}", m.fse);
}

#[test]
fn pose_csv_round_trip() {
    let traj = walk(2, 5, 0.2);
    let bytes = poses_to_csv(&traj);
    let back = poses_from_csv(&bytes, "mem", DT).unwrap();
    assert_eq!(back.frames, traj.frames);
    assert_eq!(back.agent_ids, traj.agent_ids);
}

#[test]
fn malformed_pose_csv_names_the_row() {
    let mut bytes = poses_to_csv(&walk(1, 2, 0.1));
    bytes.extend_from_slice(b"1,0,3,0.1,oops,0.2\n");
    let err = poses_from_csv(&bytes, "poses.csv", DT)
        .unwrap_err()
        .to_string();
    let rows = 1 + 2 * 22 + 1;
    assert!(err.contains(&format!("poses.csv:{rows}")), "{err}");
}
