//! Reverse-mode gradients against central finite differences, at three
//! depths: single operations, whole modules and full rollouts.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, sum, ParamKey, Tape, Var};
use crate::controllers::{friction_force, pd_force, PdGains};
use crate::error::{Error, Result};
use crate::interaction::{interaction_force, repulsive_force_xy, AgentView, InteractionParams};
use crate::ipm::{
    cartesian_to_generalized, coriolis_vector, gravity_vector, inertia_matrix, semi_implicit_step,
    solve_accel, ApplyAt, BodyParams, GeneralizedForce, IpmAcceleration, IpmState, IpmVelocity,
};
use crate::models::{Models, ParamGroup};
use crate::nn::LstmState;
use crate::rng;
use crate::sim::{simulate, AgentInit, PushEvent, Scenario};
use crate::training::{sequence_gradients, sequence_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Depth {
    Primitives,
    Modules,
    EndToEnd,
}

impl Depth {
    pub const ALL: [Depth; 3] = [Depth::Primitives, Depth::Modules, Depth::EndToEnd];

    /// Largest acceptable relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Depth::Primitives => 1e-6,
            Depth::Modules => 1e-5,
            Depth::EndToEnd => 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub depth: Depth,
    pub params: usize,
    pub max_rel_error: f64,
    /// Largest finite-difference gradient seen, for scale.
    pub max_abs_grad: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl GradReport {
    pub fn worst(&self, depth: Depth) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.depth == depth)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

const H: f64 = 1e-6;

struct Runner {
    depth: Depth,
    checks: Vec<CheckResult>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, params: &[f64], f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let r = grad_check(f, params, H)?;
        let scale = r.fd.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        self.push(name, params.len(), r.max_rel_error, scale);
        Ok(())
    }

    fn push(&mut self, name: &str, params: usize, err: f64, max_abs_grad: f64) {
        let threshold = self.depth.threshold();
        self.checks.push(CheckResult {
            name: name.into(),
            depth: self.depth,
            params,
            max_rel_error: err,
            max_abs_grad,
            threshold,
            passed: err < threshold,
        });
    }
}

/// Random weights for a weighted sum, so vector outputs reduce to a scalar.
fn weights(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot<'t>(w: &[f64], v: impl IntoIterator<Item = Var<'t>>) -> Var<'t> {
    sum(w.iter().zip(v).map(|(w, v)| v * *w))
}

fn primitives(r: &mut Runner) -> Result<()> {
    type Unary = for<'t> fn(Var<'t>) -> Result<Var<'t>>;
    let unary: [(&str, Unary, &[f64]); 14] = [
        ("sin", |x| Ok(x.sin()), &[-1.3, 0.0, 2.2]),
        ("cos", |x| Ok(x.cos()), &[-1.3, 0.4, 2.2]),
        ("exp", |x| Ok(x.exp()), &[-2.0, 0.0, 1.5]),
        ("tanh", |x| Ok(x.tanh()), &[-2.0, 0.1, 1.5]),
        ("sigmoid", |x| Ok(x.sigmoid()), &[-3.0, 0.0, 2.0]),
        ("elu", |x| Ok(x.elu()), &[-1.5, -0.2, 0.7]),
        ("softplus", |x| Ok(x.softplus()), &[-4.0, 0.0, 3.0]),
        ("abs", |x| Ok(x.abs()), &[-0.8, 1.1]),
        ("square", |x| Ok(x.square()), &[-1.2, 0.5]),
        ("powi", |x| Ok(x.powi(3)), &[-1.2, 0.7]),
        ("sqrt", |x| x.sqrt(), &[0.01, 0.5, 4.0]),
        ("ln", |x| x.ln(), &[0.05, 1.0, 7.0]),
        ("asin", |x| x.asin(), &[-0.9, 0.0, 0.6]),
        ("neg", |x| Ok(-x), &[0.3]),
    ];
    for (name, f, points) in unary {
        for &p in points {
            r.check(&format!("{name}({p})"), &[p], move |_, x| f(x[0]))?;
        }
    }
    let args = [0.7, -1.3];
    r.check("add", &args, |_, x| Ok(x[0] + x[1]))?;
    r.check("sub", &args, |_, x| Ok(x[0] - x[1]))?;
    r.check("mul", &args, |_, x| Ok(x[0] * x[1]))?;
    r.check("div", &args, |_, x| Ok(x[0] / x[1]))?;
    r.check("const ops", &args, |_, x| {
        Ok((x[0] + 2.0) * 3.0 - x[1] / 4.0)
    })?;
    r.check("atan2", &args, |_, x| x[0].atan2(x[1]))?;
    r.check("shared ancestor", &args, |_, x| {
        Ok((x[0] + x[1]) * x[0] * x[0].sin())
    })?;
    Ok(())
}

/// A pose away from every special value.
fn generic_state(rng: &mut impl Rng) -> [f64; 8] {
    [
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-0.4..0.4),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    ]
}

fn split<'t>(x: &[Var<'t>]) -> (IpmState<Var<'t>>, IpmVelocity<Var<'t>>) {
    (
        IpmState::from_array([x[0], x[1], x[2], x[3]]),
        IpmVelocity::from_array([x[4], x[5], x[6], x[7]]),
    )
}

fn modules(r: &mut Runner, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, "gradcheck.modules");
    let body = BodyParams::new(70.0)?;
    for k in 0..3 {
        let mut p = generic_state(&mut rng).to_vec();
        p.push(rng.gen_range(0.6..1.2));
        p.extend(weights(&mut rng, 4).iter().map(|w| 100.0 * w));
        let w = weights(&mut rng, 4);
        r.check(&format!("solve_accel #{k}"), &p, |_, x| {
            let (s, v) = split(x);
            let l = x[8];
            let b = body.lift();
            let m = inertia_matrix(&s, l, &b)?;
            let c = coriolis_vector(&s, &v, l, &b)?;
            let g = gravity_vector(&s, l, &b)?;
            let acc = solve_accel(&m, &c, &g, &GeneralizedForce([x[9], x[10], x[11], x[12]]))?;
            Ok(dot(&w, acc.to_array()))
        })?;
        r.check(&format!("semi_implicit_step #{k}"), &p[..12], |_, x| {
            let (s, v) = split(x);
            let acc = IpmAcceleration::from_array([x[8], x[9], x[10], x[11]]);
            let (s2, v2) = semi_implicit_step(&s, &v, &acc, 1.0 / 60.0)?;
            Ok(dot(&w, s2.to_array()) + dot(&w, v2.to_array()))
        })?;
    }

    let gains = PdGains::default();
    let mut p = generic_state(&mut rng).to_vec();
    p.extend([0.3, -0.2]);
    let w = weights(&mut rng, 4);
    r.check("pd_force", &p, |_, x| {
        let (s, v) = split(x);
        Ok(dot(&w, pd_force(&s, &v, [x[8], x[9]], &gains).0))
    })?;
    let p = [0.4, -0.7, 0.2, 0.9, 1.3];
    r.check("friction_force", &p, |_, x| {
        let v = IpmVelocity::from_array([x[0], x[1], x[2], x[3]]);
        Ok(dot(&w, friction_force(&v, x[4].softplus()).0))
    })?;
    let mut p = generic_state(&mut rng)[..4].to_vec();
    p.extend([0.9, 120.0, -40.0, 30.0]);
    for at in [ApplyAt::RodEnd, ApplyAt::Cart] {
        r.check(&format!("cartesian_to_generalized {at:?}"), &p, |_, x| {
            let s = IpmState::from_array([x[0], x[1], x[2], x[3]]);
            Ok(dot(
                &w,
                cartesian_to_generalized(&s, x[4], [x[5], x[6], x[7]], at).0,
            ))
        })?;
    }

    let params = InteractionParams::default();
    let cases: [[f64; 4]; 4] = [
        [0.4, 0.0, 1.0, 0.0],
        [0.3, -0.2, 0.5, 0.8],
        [-0.25, 0.35, -1.2, 0.3],
        [0.45, 0.1, 0.0, 0.0],
    ];
    let w2 = weights(&mut rng, 2);
    for (k, c) in cases.iter().enumerate() {
        r.check(&format!("repulsive_force_xy #{k}"), c, |_, x| {
            let rep = repulsive_force_xy([x[0], x[1]], [x[2], x[3]], &params, 1.0 / 60.0)?;
            Ok(dot(&w2, rep.force))
        })?;
    }

    let models = active_models(seed);
    let feats = weights(&mut rng, 7);
    r.check("self force LSTM, two steps", &feats, |tape, x| {
        let mut state = LstmState::zeros(models.self_net.lstm.hidden_size());
        let a = models.self_net.force(tape, x, &mut state)?;
        let reversed: Vec<Var<'_>> = x.iter().rev().copied().collect();
        let b = models.self_net.force(tape, &reversed, &mut state)?;
        Ok(dot(&w, a.0) + dot(&w, b.0))
    })?;
    let mut p = generic_state(&mut rng).to_vec();
    p.extend(generic_state(&mut rng));
    p[8] = p[0] + 0.35;
    p[9] = p[1] - 0.1;
    r.check("interaction_force with residual", &p, |tape, x| {
        let (sn, vn) = split(&x[..8]);
        let (sj, vj) = split(&x[8..]);
        let view = |s, v| AgentView {
            state: s,
            vel: v,
            yaw: 0.3,
        };
        let f = interaction_force(
            tape,
            view(&sn, &vn),
            view(&sj, &vj),
            Some(&models.inta_net),
            &params,
            1.0 / 60.0,
        )?;
        Ok(dot(&w, f.total().0))
    })?;
    Ok(())
}

/// Fresh models whose output heads are small random values instead of
/// zero, so every network takes part in the gradient.
pub fn active_models(seed: u64) -> Models {
    let mut m = Models::new(seed);
    let mut rng = rng::stream(seed, "gradcheck.heads");
    let mut fill = |values: &mut [f64], scale: f64| {
        values
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale))
    };
    for p in m.self_net.lstm.head.params_mut() {
        fill(p.values_mut(), 0.5);
    }
    let rod = m.rod_net.mlp.layers.last_mut().expect("rod net has layers");
    for p in rod.params_mut() {
        fill(p.values_mut(), 0.05);
    }
    let inta = m
        .inta_net
        .mlp
        .layers
        .last_mut()
        .expect("interaction net has layers");
    for p in inta.params_mut() {
        fill(p.values_mut(), 0.5);
    }
    m
}

/// Two agents close enough to interact, 30 frames, one push with a sideways
/// component so every channel moves.
pub fn end_to_end_scene() -> Scenario {
    let mut a = AgentInit::at(1, 0.0, 0.0);
    a.theta = 0.02;
    let b = AgentInit::at(2, 0.42, 0.05);
    let mut s = Scenario::new("gradcheck_pair", 30, vec![a, b]);
    s.pushes.push(PushEvent {
        agent: 1,
        start: 2,
        duration: 8,
        force: [300.0, 80.0, 0.0],
        at: ApplyAt::RodEnd,
    });
    s
}

/// Loss of a full rollout with respect to `μ` and `per_net` randomly chosen
/// weights of every network.
fn end_to_end(r: &mut Runner, seed: u64, per_net: usize) -> Result<()> {
    let scene = end_to_end_scene();
    let models = active_models(seed);
    let mut target_scene = scene.clone();
    target_scene.pushes[0].force = [260.0, 60.0, 0.0];
    let target = simulate(&target_scene, &Models::new(seed).with_mu(2.0)?)?;
    if let Some(e) = target.failure {
        return Err(e);
    }
    let target = target.trajectory;
    let lambda = 1.0;
    let all = ParamGroup::ALL.into_iter().collect();
    let (_, grads) = sequence_gradients(&scene, &models, &target, lambda, &all)?;

    let loss_at = |m: &Models| -> Result<f64> {
        let tape = Tape::inert();
        Ok(sequence_loss(&tape, &scene, m, &target, lambda, &all)?.value())
    };
    let mut rng = rng::stream(seed, "gradcheck.sample");
    let mut picks: Vec<(ParamGroup, ParamKey)> =
        vec![(ParamGroup::Friction, models.friction.rho.key(0))];
    for group in ParamGroup::networks() {
        let params = models.group_params(group);
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        let total: usize = sizes.iter().sum();
        for flat in sample(&mut rng, total, per_net.min(total)) {
            let (mut i, mut off) = (0, flat);
            while off >= sizes[i] {
                off -= sizes[i];
                i += 1;
            }
            picks.push((group, params[i].key(off)));
        }
    }

    for group in ParamGroup::ALL {
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        let mut count = 0;
        for &(_, key) in picks.iter().filter(|(g, _)| *g == group) {
            let probe = |delta: f64| -> Result<f64> {
                let mut m = models.clone();
                let p = m
                    .group_params_mut(group)
                    .into_iter()
                    .find(|p| p.id() == key.block)
                    .ok_or_else(|| Error::validation("gradcheck", "sampled parameter vanished"))?;
                p.values_mut()[key.index as usize] += delta;
                loss_at(&m)
            };
            let fd = (probe(H)? - probe(-H)?) / (2.0 * H);
            let ad = grads.get(key);
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
            scale = scale.max(fd.abs());
            count += 1;
        }
        r.push(&format!("rollout loss wrt {group:?}"), count, worst, scale);
    }
    Ok(())
}

/// Run the checks of `depth`.
pub fn run(depth: Depth, seed: u64) -> Result<GradReport> {
    let mut r = Runner {
        depth,
        checks: Vec::new(),
    };
    match depth {
        Depth::Primitives => primitives(&mut r)?,
        Depth::Modules => modules(&mut r, seed)?,
        Depth::EndToEnd => end_to_end(&mut r, seed, 20)?,
    }
    let passed = r.checks.iter().all(|c| c.passed);
    Ok(GradReport {
        seed,
        checks: r.checks,
        passed,
    })
}

/// Every depth in one report.
pub fn run_all(seed: u64) -> Result<GradReport> {
    let mut checks = Vec::new();
    for d in Depth::ALL {
        checks.extend(run(d, seed)?.checks);
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradReport {
        seed,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let r = run(Depth::Primitives, 0).unwrap();
        assert!(
            r.passed,
            "{:#?}",
            r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>()
        );
    }

    #[test]
    fn modules_pass_and_cover_repulsion() {
        let r = run(Depth::Modules, 0).unwrap();
        assert!(
            r.passed,
            "{:#?}",
            r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>()
        );
        assert!(r
            .checks
            .iter()
            .any(|c| c.name.starts_with("repulsive_force_xy")));
    }
}
