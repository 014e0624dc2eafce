//! Mirror symmetry, permutation equivariance and determinism of rollouts.

use ldp_core::ipm::GeneralizedForce;
use ldp_core::models::Models;
use ldp_core::scenarios::{self, NAMES};
use ldp_core::sim::{simulate, trajectory_to_csv, AgentInit, PushEvent, Scenario, Trajectory};
use proptest::prelude::*;

fn mirrored_force(f: &GeneralizedForce) -> [f64; 4] {
    [f.0[0], -f.0[1], f.0[2], -f.0[3]]
}

/// Every channel of `b` is the exact y-mirror of `a`. Compared with `==`,
/// so a zero may change sign.
fn assert_mirrored(a: &Trajectory, b: &Trajectory) {
    assert_eq!(a.len(), b.len());
    for (t, (fa, fb)) in a.frames.iter().zip(&b.frames).enumerate() {
        for (n, (ra, rb)) in fa.iter().zip(fb).enumerate() {
            let at = format!("frame {t} agent {n}");
            assert_eq!(ra.state.x, rb.state.x, "{at} x");
            assert_eq!(ra.state.y, -rb.state.y, "{at} y");
            assert_eq!(ra.state.theta, rb.state.theta, "{at} θ");
            assert_eq!(ra.state.phi, -rb.state.phi, "{at} φ");
            assert_eq!(ra.vel.x, rb.vel.x, "{at} ẋ");
            assert_eq!(ra.vel.y, -rb.vel.y, "{at} ẏ");
            assert_eq!(ra.vel.theta, rb.vel.theta, "{at} θ̇");
            assert_eq!(ra.vel.phi, -rb.vel.phi, "{at} φ̇");
            assert_eq!(ra.l, rb.l, "{at} l");
            assert_eq!(
                mirrored_force(&ra.forces.net),
                rb.forces.net.0,
                "{at} net force"
            );
        }
    }
}

#[test]
fn bundled_scenarios_are_mirror_symmetric() {
    let models = Models::new(0);
    for name in NAMES {
        let sc = scenarios::bundled(name).unwrap();
        let a = simulate(&sc, &models).unwrap();
        let b = simulate(&sc.mirrored_y(), &models).unwrap();
        assert!(a.is_ok() && b.is_ok(), "{name}");
        assert_mirrored(&a.trajectory, &b.trajectory);
    }
}

#[test]
fn rollouts_are_bit_identical_across_runs() {
    for name in NAMES {
        let sc = scenarios::bundled(name).unwrap();
        let a = trajectory_to_csv(&simulate(&sc, &Models::new(11)).unwrap().trajectory);
        let b = trajectory_to_csv(&simulate(&sc, &Models::new(11)).unwrap().trajectory);
        assert_eq!(a, b, "{name}");
    }
}

prop_compose! {
    fn scene()(
        n in 2usize..6,
        seed_xy in prop::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 6),
        angles in prop::collection::vec((-0.2f64..0.2, -0.2f64..0.2, -1.0f64..1.0), 6),
        push in (0usize..6, -600.0f64..600.0, -600.0f64..600.0),
    ) -> Scenario {
        let agents: Vec<AgentInit> = (0..n)
            .map(|i| {
                // Spread agents on a coarse grid so no two start inside each other.
                let (dx, dy) = seed_xy[i];
                let (theta, phi, yaw) = angles[i];
                AgentInit {
                    theta,
                    phi,
                    yaw,
                    ..AgentInit::at(i, i as f64 * 0.6 + dx * 0.1, dy * 0.3)
                }
            })
            .collect();
        let mut sc = Scenario::new("prop", 40, agents);
        sc.pushes.push(PushEvent {
            agent: push.0 % n,
            start: 2,
            duration: 6,
            force: [push.1, push.2, 0.0],
            at: Default::default(),
        });
        sc
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_scenes_are_mirror_symmetric(sc in scene()) {
        let models = Models::new(3);
        let a = simulate(&sc, &models).unwrap();
        let b = simulate(&sc.mirrored_y(), &models).unwrap();
        prop_assert_eq!(a.is_ok(), b.is_ok());
        assert_mirrored(&a.trajectory, &b.trajectory);
    }

    #[test]
    fn permuting_agents_permutes_the_trajectory(sc in scene(), rot in 1usize..6) {
        let n = sc.agents.len();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let models = Models::new(5);
        let a = simulate(&sc, &models).unwrap();
        let b = simulate(&sc.permuted(&order), &models).unwrap();
        prop_assert_eq!(a.is_ok(), b.is_ok());
        prop_assert_eq!(a.trajectory.len(), b.trajectory.len());
        for (fa, fb) in a.trajectory.frames.iter().zip(&b.trajectory.frames) {
            for (i, &src) in order.iter().enumerate() {
                prop_assert_eq!(fb[i], fa[src]);
            }
        }
    }
}
