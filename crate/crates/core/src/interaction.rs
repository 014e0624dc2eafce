//! Pairwise interaction between agents: neighborhood detection, the
//! elliptical repulsive potential on the cart, constant-magnitude angular
//! pushes chosen from sign tables, and a learned residual.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, Tape, Var};
use crate::error::{Error, Result};
use crate::ipm::{GeneralizedForce, IpmState, IpmVelocity};
use crate::nn::{Mlp, ParamIds};

pub const INTERACTION_NET_INPUTS: usize = 10;
pub const INTERACTION_NET_HIDDEN: [usize; 2] = [512, 512];
/// Carts closer than this are treated as coincident.
pub const OVERLAP_DISTANCE: f64 = 1e-6;
// Radicands of the semi-minor axis below this count as degenerate.
const RADICAND_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionParams {
    /// Potential strength `u`.
    pub u: f64,
    /// Potential range `σ` in meters.
    pub sigma: f64,
    pub k_theta: f64,
    pub k_phi: f64,
    /// Neighborhood radius in meters.
    pub r_neigh: f64,
    /// Angles within `±eps_angle` classify as zero.
    pub eps_angle: f64,
}

impl Default for InteractionParams {
    fn default() -> Self {
        InteractionParams {
            u: 150.0,
            sigma: 0.5,
            k_theta: 100.0,
            k_phi: 50.0,
            r_neigh: 0.5,
            eps_angle: 0.01,
        }
    }
}

impl InteractionParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("interaction.u", self.u),
            ("interaction.sigma", self.sigma),
            ("interaction.k_theta", self.k_theta),
            ("interaction.k_phi", self.k_phi),
            ("interaction.r_neigh", self.r_neigh),
            ("interaction.eps_angle", self.eps_angle),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(name, format!("{v} is not positive")));
            }
        }
        Ok(())
    }
}

/// Indices `j ≠ n` whose carts lie strictly within `r_neigh` of agent `n`,
/// in ascending order.
pub fn neighborhood(positions: &[[f64; 2]], n: usize, r_neigh: f64) -> Vec<usize> {
    let [xn, yn] = positions[n];
    positions
        .iter()
        .enumerate()
        .filter(|&(j, p)| j != n && (xn - p[0]).hypot(yn - p[1]) < r_neigh)
        .map(|(j, _)| j)
        .collect()
}

fn norm<'t>(v: [Var<'t>; 2]) -> Result<Var<'t>> {
    let sq = v[0].square() + v[1].square();
    if sq.value() == 0.0 {
        return Ok(Var::constant(0.0));
    }
    sq.sqrt()
}

/// Semi-minor axis of the velocity-skewed ellipse through `r_nj`:
///
/// ```text
/// b = ½·√((‖r‖ + ‖r − Δt·ṙ_jn‖)² − ‖Δt·ṙ_jn‖²)
/// ```
///
/// The flag is set when the radicand had to be clamped at zero.
pub fn semi_minor_axis<'t>(
    r_nj: [Var<'t>; 2],
    rdot_jn: [Var<'t>; 2],
    dt: f64,
) -> Result<(Var<'t>, bool)> {
    let d = [rdot_jn[0] * dt, rdot_jn[1] * dt];
    let s = norm(r_nj)? + norm([r_nj[0] - d[0], r_nj[1] - d[1]])?;
    let radicand = s.square() - (d[0].square() + d[1].square());
    if radicand.value() <= RADICAND_FLOOR {
        return Ok((Var::constant(0.0), true));
    }
    Ok((radicand.sqrt()? * 0.5, false))
}

/// Outcome of [`repulsive_force_xy`].
#[derive(Debug, Clone, Copy)]
pub struct Repulsion<'t> {
    pub force: [Var<'t>; 2],
    pub b: Var<'t>,
    pub clamped: bool,
}

/// `−∇_r u·e^{−b(r)/σ}` with respect to the relative position `r_nj`.
///
/// With `S = ‖r‖ + ‖r − d‖` and `d = Δt·ṙ_jn` the gradient has the closed
/// form `∇b = S·(r̂ + ê)/(4b)` where `ê` is the unit vector along `r − d`,
/// so the force is recorded directly rather than through a nested tape.
/// When `b` degenerates the force falls back to the radial `(u/σ)·r̂`.
pub fn repulsive_force_xy<'t>(
    r_nj: [Var<'t>; 2],
    rdot_jn: [Var<'t>; 2],
    params: &InteractionParams,
    dt: f64,
) -> Result<Repulsion<'t>> {
    let dist = r_nj[0].value().hypot(r_nj[1].value());
    if dist < OVERLAP_DISTANCE {
        return Err(Error::AgentOverlap { distance: dist });
    }
    let coef = params.u / params.sigma;
    let r_len = norm(r_nj)?;
    let r_hat = [r_nj[0] / r_len, r_nj[1] / r_len];
    let (b, clamped) = semi_minor_axis(r_nj, rdot_jn, dt)?;
    if clamped {
        return Ok(Repulsion {
            force: [r_hat[0] * coef, r_hat[1] * coef],
            b,
            clamped,
        });
    }
    let e = [r_nj[0] - rdot_jn[0] * dt, r_nj[1] - rdot_jn[1] * dt];
    let e_len = norm(e)?;
    // ‖r − d‖ = 0 forces b = 0, which was handled above.
    let e_hat = [e[0] / e_len, e[1] / e_len];
    let s = r_len + e_len;
    let mag = (b / -params.sigma).exp() * coef * s / (b * 4.0);
    Ok(Repulsion {
        force: [mag * (r_hat[0] + e_hat[0]), mag * (r_hat[1] + e_hat[1])],
        b,
        clamped,
    })
}

/// Which angle a sign table is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AngleKind {
    Theta,
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Pos,
    Zero,
    Neg,
}

fn classify(angle: f64, eps: f64) -> Class {
    if angle > eps {
        Class::Pos
    } else if angle < -eps {
        Class::Neg
    } else {
        Class::Zero
    }
}

// Rows: agent n's class; columns: neighbor j's class; pairs: (before, behind).
const THETA_TABLE: [[(i8, i8); 3]; 3] = [
    [(1, -1), (0, -1), (0, -1)],
    [(1, 0), (0, 0), (0, -1)],
    [(1, 0), (1, 0), (1, -1)],
];
const PHI_TABLE: [[(i8, i8); 3]; 3] = [
    [(-1, 1), (-1, 0), (-1, 0)],
    [(0, 1), (0, 0), (-1, 0)],
    [(0, 1), (0, 1), (-1, 1)],
];

/// Sign of the constant angular push on agent `n` from neighbor `j`.
///
/// `rel` is the neighbor-relative coordinate `r_n − r_j` along the axis that
/// selects the before/behind column, in agent `n`'s local frame: the forward
/// component for θ, the lateral component for φ. The neighbor counts as
/// "before" when `rel > 0`. A φ push with `rel` exactly zero has no defined
/// side and is zero, which keeps the table antisymmetric under a lateral
/// mirror.
pub fn angular_sign(angle_n: f64, angle_j: f64, rel: f64, eps: f64, which: AngleKind) -> i8 {
    let idx = |c: Class| match c {
        Class::Pos => 0,
        Class::Zero => 1,
        Class::Neg => 2,
    };
    let (table, tie_is_zero) = match which {
        AngleKind::Theta => (&THETA_TABLE, false),
        AngleKind::Phi => (&PHI_TABLE, true),
    };
    if tie_is_zero && rel == 0.0 {
        return 0;
    }
    let (before, behind) = table[idx(classify(angle_n, eps))][idx(classify(angle_j, eps))];
    if rel > 0.0 {
        before
    } else {
        behind
    }
}

/// MLP residual over `[x_nj, y_nj, θ_n, φ_n, θ_j, φ_j, ẋ_nj, ẏ_nj, θ̇_nj, φ̇_nj]`.
#[derive(Debug, Clone)]
pub struct InteractionNet {
    pub mlp: Mlp,
}

impl InteractionNet {
    pub fn new(ids: &mut ParamIds, rng: &mut impl Rng) -> Self {
        let [h0, h1] = INTERACTION_NET_HIDDEN;
        InteractionNet {
            mlp: Mlp::new(ids, "inta", &[INTERACTION_NET_INPUTS, h0, h1, 4], rng),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.mlp.params_mut()
    }

    /// The head is all zeros, so the residual contributes exactly nothing.
    pub fn is_inactive(&self) -> bool {
        self.mlp.head_is_zero()
    }
}

/// What one agent contributes to a pair computation.
#[derive(Debug, Clone, Copy)]
pub struct AgentView<'a, 't> {
    pub state: &'a IpmState<Var<'t>>,
    pub vel: &'a IpmVelocity<Var<'t>>,
    /// Facing angle; generalized coordinates live in the frame rotated by it.
    pub yaw: f64,
}

impl<'t> AgentView<'_, 't> {
    fn world_xy(&self) -> [Var<'t>; 2] {
        rotate([self.state.x, self.state.y], self.yaw)
    }

    fn world_vxy(&self) -> [Var<'t>; 2] {
        rotate([self.vel.x, self.vel.y], self.yaw)
    }
}

/// Rotate a planar vector by `angle`; the identity when `angle` is zero.
pub fn rotate<'t>(v: [Var<'t>; 2], angle: f64) -> [Var<'t>; 2] {
    if angle == 0.0 {
        return v;
    }
    let (s, c) = angle.sin_cos();
    [v[0] * c - v[1] * s, v[0] * s + v[1] * c]
}

/// The parts of the force on `n` from one neighbor.
#[derive(Debug, Clone, Copy)]
pub struct PairForce<'t> {
    /// Repulsion on the cart plus the sign-table angular pushes.
    pub basic: GeneralizedForce<Var<'t>>,
    pub residual: GeneralizedForce<Var<'t>>,
    pub clamped: bool,
}

impl<'t> PairForce<'t> {
    pub fn total(&self) -> GeneralizedForce<Var<'t>> {
        self.basic + self.residual
    }
}

/// Force on agent `n` from neighbor `j`, in `n`'s generalized coordinates.
///
/// Without `net`, or with a silent net on an inert tape, the residual is zero.
pub fn interaction_force<'t>(
    tape: &'t Tape,
    n: AgentView<'_, 't>,
    j: AgentView<'_, 't>,
    net: Option<&InteractionNet>,
    params: &InteractionParams,
    dt: f64,
) -> Result<PairForce<'t>> {
    let (pn, pj) = (n.world_xy(), j.world_xy());
    let (vn, vj) = (n.world_vxy(), j.world_vxy());
    let r_nj = [pn[0] - pj[0], pn[1] - pj[1]];
    let rdot_jn = [vj[0] - vn[0], vj[1] - vn[1]];
    let rep = repulsive_force_xy(r_nj, rdot_jn, params, dt)?;
    let f_local = rotate(rep.force, -n.yaw);
    let r_local = rotate(r_nj, -n.yaw);

    let eps = params.eps_angle;
    let s_theta = angular_sign(
        n.state.theta.value(),
        j.state.theta.value(),
        r_local[0].value(),
        eps,
        AngleKind::Theta,
    );
    let s_phi = angular_sign(
        n.state.phi.value(),
        j.state.phi.value(),
        r_local[1].value(),
        eps,
        AngleKind::Phi,
    );
    let basic = GeneralizedForce([
        f_local[0],
        f_local[1],
        Var::constant(params.k_theta * f64::from(s_theta)),
        Var::constant(params.k_phi * f64::from(s_phi)),
    ]);

    let residual = if let Some(net) = net.filter(|n| tape.is_recording() || !n.is_inactive()) {
        let v_local = rotate([vn[0] - vj[0], vn[1] - vj[1]], -n.yaw);
        let features = [
            r_local[0],
            r_local[1],
            n.state.theta,
            n.state.phi,
            j.state.theta,
            j.state.phi,
            v_local[0],
            v_local[1],
            n.vel.theta - j.vel.theta,
            n.vel.phi - j.vel.phi,
        ];
        let out = net.mlp.forward(tape, &features)?;
        GeneralizedForce([out[0], out[1], out[2], out[3]])
    } else {
        GeneralizedForce::zero()
    };
    Ok(PairForce {
        basic,
        residual,
        clamped: rep.clamped,
    })
}
