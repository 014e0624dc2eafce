//! Inverted pendulum on a planar cart.
//!
//! Generalized coordinates are `[x, y, θ, φ]`: the cart position on the
//! ground plane and the rod's rotations about the local Y and X axes. The
//! point mass sits at
//!
//! ```text
//! p = [x + l·sinθ,  y − l·cosθ·sinφ,  l·cosθ·cosφ]
//! ```
//!
//! which is the kinematic map whose Lagrangian yields the inertia and gravity
//! terms below. The equation of motion is `M(q,l)·q̈ + C(q,q̇,l) + G(q,l) = F`.

use std::f64::consts::FRAC_PI_2;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::autodiff::{sum, Var};
use crate::error::{Error, Result};

/// Distance kept from the `|θ| = π/2` singularity of the inertia matrix.
pub const SINGULARITY_MARGIN: f64 = 0.05;
/// Largest admissible `|θ|` or `|φ|`.
pub const MAX_TILT: f64 = FRAC_PI_2 - SINGULARITY_MARGIN;
pub const DEFAULT_GRAVITY: f64 = 9.81;
pub const DEFAULT_MASS: f64 = 70.0;
pub const CART_MASS_FRACTION: f64 = 0.1;
pub const PENDULUM_MASS_FRACTION: f64 = 0.9;

// Inertia matrices with a pivot ratio beyond this are treated as singular.
const MAX_PIVOT_RATIO: f64 = 1e12;

macro_rules! four_vector {
    ($name:ident { $($field:ident),+ }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
        pub struct $name<T = f64> {
            $(pub $field: T,)+
        }

        impl<T: Copy> $name<T> {
            pub fn from_array(a: [T; 4]) -> Self {
                let [$($field),+] = a;
                $name { $($field),+ }
            }

            pub fn to_array(&self) -> [T; 4] {
                [$(self.$field),+]
            }

            pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> $name<U> {
                $name { $($field: f(self.$field)),+ }
            }
        }

        impl $name<f64> {
            pub fn lift<'t>(&self) -> $name<Var<'t>> {
                self.map(Var::constant)
            }
        }

        impl<'t> $name<Var<'t>> {
            pub fn values(&self) -> $name<f64> {
                self.map(Var::value)
            }
        }
    };
}

four_vector!(IpmState { x, y, theta, phi });
four_vector!(IpmVelocity { x, y, theta, phi });
four_vector!(IpmAcceleration { x, y, theta, phi });

impl IpmState<f64> {
    pub fn upright(x: f64, y: f64) -> Self {
        IpmState {
            x,
            y,
            theta: 0.0,
            phi: 0.0,
        }
    }
}

/// A force expressed in the generalized coordinates `[x, y, θ, φ]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneralizedForce<T = f64>(pub [T; 4]);

impl<'t> GeneralizedForce<Var<'t>> {
    pub fn zero() -> Self {
        GeneralizedForce([Var::constant(0.0); 4])
    }

    pub fn values(&self) -> GeneralizedForce<f64> {
        GeneralizedForce(self.0.map(Var::value))
    }

    pub fn scale(&self, k: f64) -> Self {
        GeneralizedForce(self.0.map(|v| v * k))
    }
}

impl GeneralizedForce<f64> {
    pub fn lift<'t>(&self) -> GeneralizedForce<Var<'t>> {
        GeneralizedForce(self.0.map(Var::constant))
    }
}

impl<'t> Add for GeneralizedForce<Var<'t>> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        GeneralizedForce([0, 1, 2, 3].map(|i| self.0[i] + rhs.0[i]))
    }
}

impl<'t> Sub for GeneralizedForce<Var<'t>> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        GeneralizedForce([0, 1, 2, 3].map(|i| self.0[i] - rhs.0[i]))
    }
}

/// Mass split and gravity of one body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyParams<T = f64> {
    /// Total mass `M` in kg.
    pub mass: T,
    /// Gravitational acceleration in m/s². Negative values hang the pendulum
    /// below the cart, which turns it into a stable oscillator.
    pub gravity: T,
}

impl Default for BodyParams<f64> {
    fn default() -> Self {
        BodyParams {
            mass: DEFAULT_MASS,
            gravity: DEFAULT_GRAVITY,
        }
    }
}

impl BodyParams<f64> {
    pub fn new(mass: f64) -> Result<Self> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::validation(
                "mass",
                format!("{mass} is not a positive mass"),
            ));
        }
        Ok(BodyParams {
            mass,
            gravity: DEFAULT_GRAVITY,
        })
    }

    pub fn lift<'t>(&self) -> BodyParams<Var<'t>> {
        BodyParams {
            mass: Var::constant(self.mass),
            gravity: Var::constant(self.gravity),
        }
    }

    pub fn pendulum_mass(&self) -> f64 {
        PENDULUM_MASS_FRACTION * self.mass
    }

    /// `M − m_p`, so that the two parts add up to `M` exactly.
    pub fn cart_mass(&self) -> f64 {
        self.mass - self.pendulum_mass()
    }
}

impl<'t> BodyParams<Var<'t>> {
    pub fn pendulum_mass(&self) -> Var<'t> {
        self.mass * PENDULUM_MASS_FRACTION
    }

    pub fn cart_mass(&self) -> Var<'t> {
        self.mass - self.pendulum_mass()
    }
}

/// Admissible range of the rod length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RodLimits {
    pub min: f64,
    pub max: f64,
}

impl Default for RodLimits {
    fn default() -> Self {
        RodLimits { min: 0.3, max: 1.5 }
    }
}

impl RodLimits {
    pub fn contains(&self, l: f64) -> bool {
        (self.min..=self.max).contains(&l)
    }

    /// Clamp keeping the gradient inside the range and cutting it outside.
    pub fn clamp<'t>(&self, l: Var<'t>) -> Var<'t> {
        if l.value() > self.max {
            Var::constant(self.max)
        } else if l.value() < self.min {
            Var::constant(self.min)
        } else {
            l
        }
    }
}

/// Where a Cartesian force acts on the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApplyAt {
    #[default]
    RodEnd,
    Cart,
}

pub type Matrix4<'t> = [[Var<'t>; 4]; 4];

pub fn check_angles<T: Copy + Into<f64>>(theta: T, phi: T) -> Result<()> {
    let (theta, phi) = (theta.into(), phi.into());
    if theta.abs() < MAX_TILT && phi.abs() < MAX_TILT {
        Ok(())
    } else {
        Err(Error::Singularity {
            theta,
            phi,
            agent: None,
            frame: None,
        })
    }
}

fn check_state(state: &IpmState<Var<'_>>) -> Result<()> {
    check_angles(state.theta.value(), state.phi.value())
}

struct Trig<'t> {
    st: Var<'t>,
    ct: Var<'t>,
    sp: Var<'t>,
    cp: Var<'t>,
}

impl<'t> Trig<'t> {
    fn of(state: &IpmState<Var<'t>>) -> Self {
        Trig {
            st: state.theta.sin(),
            ct: state.theta.cos(),
            sp: state.phi.sin(),
            cp: state.phi.cos(),
        }
    }
}

pub fn inertia_matrix<'t>(
    state: &IpmState<Var<'t>>,
    l: Var<'t>,
    body: &BodyParams<Var<'t>>,
) -> Result<Matrix4<'t>> {
    check_state(state)?;
    let Trig { st, ct, sp, cp } = Trig::of(state);
    let mp = body.pendulum_mass();
    let total = body.cart_mass() + mp;
    let mpl = mp * l;
    let zero = Var::constant(0.0);
    let m02 = mpl * ct;
    let m12 = mpl * st * sp;
    let m13 = -(mpl * ct * cp);
    let m22 = mpl * l;
    let m33 = mpl * l * ct * ct;
    Ok([
        [total, zero, m02, zero],
        [zero, total, m12, m13],
        [m02, m12, m22, zero],
        [zero, m13, zero, m33],
    ])
}

/// Centrifugal and Coriolis terms as a vector.
pub fn coriolis_vector<'t>(
    state: &IpmState<Var<'t>>,
    vel: &IpmVelocity<Var<'t>>,
    l: Var<'t>,
    body: &BodyParams<Var<'t>>,
) -> Result<[Var<'t>; 4]> {
    check_state(state)?;
    let Trig { st, ct, sp, cp } = Trig::of(state);
    let mpl = body.pendulum_mass() * l;
    let (td, pd) = (vel.theta, vel.phi);
    let td2 = td * td;
    let pd2 = pd * pd;
    Ok([
        -(mpl * st * td2),
        mpl * ((st * cp * td * pd) * 2.0 + ct * sp * (td2 + pd2)),
        mpl * l * st * cp * pd2,
        -(mpl * l * st * ct * td * pd * 2.0),
    ])
}

pub fn gravity_vector<'t>(
    state: &IpmState<Var<'t>>,
    l: Var<'t>,
    body: &BodyParams<Var<'t>>,
) -> Result<[Var<'t>; 4]> {
    check_state(state)?;
    let Trig { st, ct, sp, cp } = Trig::of(state);
    let mgl = body.pendulum_mass() * body.gravity * l;
    let zero = Var::constant(0.0);
    Ok([zero, zero, -(mgl * st * cp), -(mgl * ct * sp)])
}

/// Solve `m·q̈ = f − c − g` by Gaussian elimination with partial pivoting.
pub fn solve_accel<'t>(
    m: &Matrix4<'t>,
    c: &[Var<'t>; 4],
    g: &[Var<'t>; 4],
    f: &GeneralizedForce<Var<'t>>,
) -> Result<IpmAcceleration<Var<'t>>> {
    let rhs = [0, 1, 2, 3].map(|i| f.0[i] - c[i] - g[i]);
    let x = solve_linear(*m, rhs)?;
    Ok(IpmAcceleration::from_array(x))
}

pub(crate) fn solve_linear<'t, const N: usize>(
    mut a: [[Var<'t>; N]; N],
    mut b: [Var<'t>; N],
) -> Result<[Var<'t>; N]> {
    let mut largest: f64 = 0.0;
    let mut smallest = f64::INFINITY;
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].value().abs().total_cmp(&a[j][col].value().abs()))
            .unwrap_or(col);
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col].value().abs();
        if p == 0.0 || !p.is_finite() {
            return Err(Error::IllConditioned {
                ratio: f64::INFINITY,
            });
        }
        largest = largest.max(p);
        smallest = smallest.min(p);
        for row in col + 1..N {
            if a[row][col].value() == 0.0 && a[row][col].is_constant() {
                continue;
            }
            let factor = a[row][col] / a[col][col];
            for k in col + 1..N {
                a[row][k] = a[row][k] - factor * a[col][k];
            }
            b[row] = b[row] - factor * b[col];
        }
    }
    if largest / smallest > MAX_PIVOT_RATIO {
        return Err(Error::IllConditioned {
            ratio: largest / smallest,
        });
    }
    let mut x = [Var::constant(0.0); N];
    for row in (0..N).rev() {
        let tail = sum((row + 1..N).map(|k| a[row][k] * x[k]));
        x[row] = (b[row] - tail) / a[row][row];
    }
    Ok(x)
}

/// `‖m·q̈ + c + g − f‖∞`
pub fn solve_residual(
    m: &Matrix4<'_>,
    c: &[Var<'_>; 4],
    g: &[Var<'_>; 4],
    f: &GeneralizedForce<Var<'_>>,
    acc: &IpmAcceleration<f64>,
) -> f64 {
    let q = acc.to_array();
    (0..4)
        .map(|i| {
            let row: f64 = (0..4).map(|k| m[i][k].value() * q[k]).sum();
            (row + c[i].value() + g[i].value() - f.0[i].value()).abs()
        })
        .fold(0.0, f64::max)
}

/// Accelerations with the cart held in place: only the angular block of the
/// equation of motion is solved and `ẍ = ÿ = 0`.
pub fn solve_accel_pinned<'t>(
    m: &Matrix4<'t>,
    c: &[Var<'t>; 4],
    g: &[Var<'t>; 4],
    f: &GeneralizedForce<Var<'t>>,
) -> Result<IpmAcceleration<Var<'t>>> {
    let block = [[m[2][2], m[2][3]], [m[3][2], m[3][3]]];
    let rhs = [2, 3].map(|i| f.0[i] - c[i] - g[i]);
    let [tdd, pdd] = solve_linear(block, rhs)?;
    let zero = Var::constant(0.0);
    Ok(IpmAcceleration {
        x: zero,
        y: zero,
        theta: tdd,
        phi: pdd,
    })
}

/// Velocity first, then position with the new velocity.
pub fn semi_implicit_step<'t>(
    state: &IpmState<Var<'t>>,
    vel: &IpmVelocity<Var<'t>>,
    acc: &IpmAcceleration<Var<'t>>,
    dt: f64,
) -> Result<(IpmState<Var<'t>>, IpmVelocity<Var<'t>>)> {
    if !(dt > 0.0) {
        return Err(Error::validation("dt", format!("{dt} is not positive")));
    }
    let v = IpmVelocity {
        x: vel.x + acc.x * dt,
        y: vel.y + acc.y * dt,
        theta: vel.theta + acc.theta * dt,
        phi: vel.phi + acc.phi * dt,
    };
    let s = IpmState {
        x: state.x + v.x * dt,
        y: state.y + v.y * dt,
        theta: state.theta + v.theta * dt,
        phi: state.phi + v.phi * dt,
    };
    for (i, q) in s.to_array().iter().chain(v.to_array().iter()).enumerate() {
        if !q.value().is_finite() {
            return Err(Error::NonFinite(format!("integrated coordinate {i}")));
        }
    }
    check_state(&s)?;
    Ok((s, v))
}

/// Position of the point mass.
pub fn rod_end_position<'t>(state: &IpmState<Var<'t>>, l: Var<'t>) -> [Var<'t>; 3] {
    let Trig { st, ct, sp, cp } = Trig::of(state);
    [state.x + l * st, state.y - l * ct * sp, l * ct * cp]
}

/// Map a Cartesian force to generalized coordinates, `Q = Jᵀ·F`.
pub fn cartesian_to_generalized<'t>(
    state: &IpmState<Var<'t>>,
    l: Var<'t>,
    force: [Var<'t>; 3],
    at: ApplyAt,
) -> GeneralizedForce<Var<'t>> {
    let [fx, fy, fz] = force;
    match at {
        ApplyAt::Cart => GeneralizedForce([fx, fy, Var::constant(0.0), Var::constant(0.0)]),
        ApplyAt::RodEnd => {
            let Trig { st, ct, sp, cp } = Trig::of(state);
            // Columns of the rod-end Jacobian for θ and φ.
            let d_theta = [l * ct, l * st * sp, -(l * st * cp)];
            let d_phi = [Var::constant(0.0), -(l * ct * cp), -(l * ct * sp)];
            let q_theta = fx * d_theta[0] + fy * d_theta[1] + fz * d_theta[2];
            let q_phi = fy * d_phi[1] + fz * d_phi[2];
            GeneralizedForce([fx, fy, q_theta, q_phi])
        }
    }
}

/// Kinetic plus potential energy, `½ q̇ᵀ M q̇ + m_p g l cosθ cosφ`.
pub fn mechanical_energy<'t>(
    state: &IpmState<Var<'t>>,
    vel: &IpmVelocity<Var<'t>>,
    l: Var<'t>,
    body: &BodyParams<Var<'t>>,
) -> Result<Var<'t>> {
    let m = inertia_matrix(state, l, body)?;
    let q = vel.to_array();
    let kinetic = sum((0..4)
        .flat_map(|i| (0..4).map(move |k| (i, k)))
        .map(|(i, k)| m[i][k] * q[i] * q[k]))
        * 0.5;
    let potential = body.pendulum_mass() * body.gravity * l * state.theta.cos() * state.phi.cos();
    Ok(kinetic + potential)
}

/// One unforced-by-controller step: accelerations from `force`, then the
/// semi-implicit update.
pub fn step_with_force<'t>(
    state: &IpmState<Var<'t>>,
    vel: &IpmVelocity<Var<'t>>,
    l: Var<'t>,
    body: &BodyParams<Var<'t>>,
    force: &GeneralizedForce<Var<'t>>,
    dt: f64,
) -> Result<(
    IpmState<Var<'t>>,
    IpmVelocity<Var<'t>>,
    IpmAcceleration<Var<'t>>,
)> {
    let m = inertia_matrix(state, l, body)?;
    let c = coriolis_vector(state, vel, l, body)?;
    let g = gravity_vector(state, l, body)?;
    let acc = solve_accel(&m, &c, &g, force)?;
    let (s, v) = semi_implicit_step(state, vel, &acc, dt)?;
    Ok((s, v, acc))
}
