//! Bundled scenarios.
//!
//! Push magnitudes are synthetic stand-ins labeled weak, medium and strong
//! by convention; they are not measured values.

use crate::ipm::ApplyAt;
use crate::sim::{AgentInit, Mode, PushEvent, Scenario};

pub const WEAK_PUSH: f64 = 400.0;
pub const MEDIUM_PUSH: f64 = 900.0;
pub const STRONG_PUSH: f64 = 1650.0;
/// Frames a push lasts (1/6 s at 60 Hz).
pub const PUSH_FRAMES: usize = 10;
/// Spacing of the line and grid formations, in meters.
pub const LINE_SPACING: f64 = 0.4;
pub const DIAMOND_SPACING: f64 = 0.45;
const HORIZON: usize = 180;

pub const NAMES: [&str; 10] = [
    "single_weak",
    "single_medium",
    "single_strong",
    "line4",
    "twolines4",
    "line5",
    "line10",
    "diamond13",
    "multiphase_push",
    "mirror_pair",
];

fn push(agent: usize, start: usize, fx: f64) -> PushEvent {
    PushEvent {
        agent,
        start,
        duration: PUSH_FRAMES,
        force: [fx, 0.0, 0.0],
        at: ApplyAt::RodEnd,
    }
}

fn single(name: &str, fx: f64) -> Scenario {
    let mut s = Scenario::new(name, HORIZON, vec![AgentInit::at(0, 0.0, 0.0)]);
    s.mode = Mode::Single;
    s.pushes.push(push(0, 0, fx));
    s
}

/// `n` agents along `+x`, ids `1..=n` from the back; the first is pushed
/// forward with `fx`.
pub fn line(name: &str, n: usize, spacing: f64, fx: f64) -> Scenario {
    let agents = (0..n)
        .map(|i| AgentInit::at(i + 1, spacing * i as f64, 0.0))
        .collect();
    let mut s = Scenario::new(name, HORIZON, agents);
    s.pushes.push(push(1, 0, fx));
    s
}

fn two_lines() -> Scenario {
    let mut agents = Vec::new();
    for row in 0..2 {
        for col in 0..2 {
            agents.push(AgentInit::at(
                agents.len() + 1,
                LINE_SPACING * col as f64,
                LINE_SPACING * row as f64,
            ));
        }
    }
    let mut s = Scenario::new("twolines4", HORIZON, agents);
    s.pushes.push(push(1, 0, STRONG_PUSH));
    s.pushes.push(push(3, 0, STRONG_PUSH));
    s
}

/// Rows of 1, 3, 5, 3, 1 agents stacked along `+x`; the three agents of the
/// back row pair are pushed forward.
fn diamond() -> Scenario {
    let mut agents = Vec::new();
    for (row, width) in [1usize, 3, 5, 3, 1].into_iter().enumerate() {
        for k in 0..width {
            let y = DIAMOND_SPACING * (k as f64 - (width as f64 - 1.0) / 2.0);
            agents.push(AgentInit::at(
                agents.len() + 1,
                DIAMOND_SPACING * row as f64,
                y,
            ));
        }
    }
    let mut s = Scenario::new("diamond13", HORIZON, agents);
    for id in [1, 2, 4] {
        s.pushes.push(push(id, 0, STRONG_PUSH));
    }
    s
}

fn multiphase() -> Scenario {
    let mut s = single("multiphase_push", WEAK_PUSH);
    s.horizon = 240;
    s.pushes.push(push(0, 15, MEDIUM_PUSH));
    s.pushes.push(push(0, 50, STRONG_PUSH));
    s
}

/// Two agents off the `x` axis with a diagonal push: exercises every lateral
/// channel, useful for mirror checks.
fn mirror_pair() -> Scenario {
    let mut a = AgentInit::at(0, 0.0, 0.1);
    a.phi = 0.02;
    let b = AgentInit::at(1, 0.42, -0.05);
    let mut s = Scenario::new("mirror_pair", 120, vec![a, b]);
    s.pushes.push(PushEvent {
        agent: 0,
        start: 3,
        duration: PUSH_FRAMES,
        force: [STRONG_PUSH, 70.0, 0.0],
        at: ApplyAt::RodEnd,
    });
    s
}

/// A bundled scenario by name. `single_*_push` is accepted for `single_*`.
pub fn bundled(name: &str) -> Option<Scenario> {
    let name = match name {
        "single_weak_push" => "single_weak",
        "single_medium_push" => "single_medium",
        "single_strong_push" => "single_strong",
        other => other,
    };
    Some(match name {
        "single_weak" => single(name, WEAK_PUSH),
        "single_medium" => single(name, MEDIUM_PUSH),
        "single_strong" => single(name, STRONG_PUSH),
        "line4" => line(name, 4, LINE_SPACING, STRONG_PUSH),
        "twolines4" => two_lines(),
        "line5" => line(name, 5, LINE_SPACING, STRONG_PUSH),
        "line10" => line(name, 10, LINE_SPACING, STRONG_PUSH),
        "diamond13" => diamond(),
        "multiphase_push" => multiphase(),
        "mirror_pair" => mirror_pair(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_validates() {
        for name in NAMES {
            let s = bundled(name).unwrap();
            s.validate().unwrap();
            assert_eq!(s.name, name);
        }
        assert_eq!(bundled("single_strong_push"), bundled("single_strong"));
        assert!(bundled("nope").is_none());
    }

    #[test]
    fn formation_sizes() {
        let count = |n: &str| bundled(n).unwrap().agents.len();
        assert_eq!(count("line4"), 4);
        assert_eq!(count("twolines4"), 4);
        assert_eq!(count("line5"), 5);
        assert_eq!(count("line10"), 10);
        assert_eq!(count("diamond13"), 13);
        assert_eq!(bundled("diamond13").unwrap().pushes.len(), 3);
    }
}
