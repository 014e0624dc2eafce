//! Per-agent self forces: PD balance recovery, the LSTM residual, ground
//! friction and the rod-length network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::ipm::{GeneralizedForce, IpmState, IpmVelocity, RodLimits, DEFAULT_MASS};
use crate::nn::{Init, LstmCell, LstmState, Mlp, ParamIds};

pub const SELF_NET_HIDDEN: usize = 256;
pub const SELF_NET_INPUTS: usize = 7;
pub const ROD_NET_HIDDEN: [usize; 2] = [128, 128];
pub const ROD_NET_INPUTS: usize = 12;
const LSTM_INIT_RANGE: f64 = 0.01;

/// Forces enter the networks in units of 100 N and mass relative to a 70 kg
/// adult, so every feature is of order one. Angles, velocities and lengths
/// are already in SI units of order one.
pub const FORCE_UNIT: f64 = 100.0;
pub const MASS_UNIT: f64 = DEFAULT_MASS;
/// The rod net's output is the length change in millimetres.
pub const ROD_STEP_UNIT: f64 = 1e-3;

/// Gains of the PD controller acting on `s = [ẋ, ẏ, θ, φ]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: [f64; 4],
    pub kd: [f64; 4],
}

impl Default for PdGains {
    fn default() -> Self {
        PdGains {
            kp: [30.0, 30.0, 1500.0, 1500.0],
            kd: [4.0, 4.0, 200.0, 200.0],
        }
    }
}

impl PdGains {
    pub fn validate(&self) -> Result<()> {
        if self
            .kp
            .iter()
            .chain(&self.kd)
            .all(|g| *g >= 0.0 && g.is_finite())
        {
            Ok(())
        } else {
            Err(Error::validation(
                "pd gains",
                "all gains must be finite and non-negative",
            ))
        }
    }
}

/// `K_p∘e + K_d∘ė` with `e = −[ẋ, ẏ, θ, φ]` and
/// `ė = −[ẍ_prev, ÿ_prev, θ̇, φ̇]`.
///
/// The linear-rate components use the accelerations of the previous step so
/// the controller does not depend on the acceleration it is about to produce.
pub fn pd_force<'t>(
    state: &IpmState<Var<'t>>,
    vel: &IpmVelocity<Var<'t>>,
    prev_accel: [Var<'t>; 2],
    gains: &PdGains,
) -> GeneralizedForce<Var<'t>> {
    let s = [vel.x, vel.y, state.theta, state.phi];
    let s_dot = [prev_accel[0], prev_accel[1], vel.theta, vel.phi];
    GeneralizedForce([0, 1, 2, 3].map(|i| -(s[i] * gains.kp[i]) - s_dot[i] * gains.kd[i]))
}

/// Friction coefficient `μ = ln(1 + e^ρ)`, shared by all agents.
#[derive(Debug, Clone)]
pub struct FrictionParam {
    pub rho: Param,
}

impl FrictionParam {
    pub fn new(id: ParamId, mu: f64) -> Result<Self> {
        Ok(FrictionParam {
            rho: Param::new(id, "friction.rho", vec![1], vec![inverse_softplus(mu)?]),
        })
    }

    pub fn mu_value(&self) -> f64 {
        Var::constant(self.rho.values()[0]).softplus().value()
    }

    pub fn mu<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.param(&self.rho, 0).softplus()
    }

    pub fn set_mu(&mut self, mu: f64) -> Result<()> {
        self.rho.values_mut()[0] = inverse_softplus(mu)?;
        Ok(())
    }
}

pub fn inverse_softplus(mu: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::validation("mu", format!("{mu} is not positive")));
    }
    // ln(e^μ − 1), rearranged to stay accurate for large μ.
    Ok(mu + (-(-mu).exp_m1()).ln())
}

/// `f = −μ·[ẋ, ẏ, 0, 0]`
pub fn friction_force<'t>(vel: &IpmVelocity<Var<'t>>, mu: Var<'t>) -> GeneralizedForce<Var<'t>> {
    let zero = Var::constant(0.0);
    GeneralizedForce([-(mu * vel.x), -(mu * vel.y), zero, zero])
}

/// LSTM residual on the self force, input `[θ, φ, ẋ, ẏ, θ̇, φ̇, M]` with the
/// mass in [`MASS_UNIT`].
#[derive(Debug, Clone)]
pub struct SelfForceNet {
    pub lstm: LstmCell,
}

impl SelfForceNet {
    pub fn new(ids: &mut ParamIds, rng: &mut impl Rng) -> Self {
        SelfForceNet {
            lstm: LstmCell::new(
                ids,
                "self_nn",
                SELF_NET_INPUTS,
                SELF_NET_HIDDEN,
                4,
                Init::Uniform(LSTM_INIT_RANGE),
                rng,
            ),
        }
    }

    pub fn initial_state<'t>(&self) -> LstmState<'t> {
        LstmState::zeros(self.lstm.hidden_size())
    }

    pub fn features<'t>(
        state: &IpmState<Var<'t>>,
        vel: &IpmVelocity<Var<'t>>,
        mass: Var<'t>,
    ) -> Vec<Var<'t>> {
        vec![
            state.theta,
            state.phi,
            vel.x,
            vel.y,
            vel.theta,
            vel.phi,
            mass / MASS_UNIT,
        ]
    }

    pub fn force<'t>(
        &self,
        tape: &'t Tape,
        features: &[Var<'t>],
        state: &mut LstmState<'t>,
    ) -> Result<GeneralizedForce<Var<'t>>> {
        self_nn_force(self, tape, features, state)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.lstm.params()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.lstm.params_mut()
    }
}

/// One LSTM step; advances `state` in place.
pub fn self_nn_force<'t>(
    net: &SelfForceNet,
    tape: &'t Tape,
    features: &[Var<'t>],
    state: &mut LstmState<'t>,
) -> Result<GeneralizedForce<Var<'t>>> {
    if features.len() != SELF_NET_INPUTS {
        return Err(Error::Shape(format!(
            "self force net expects {SELF_NET_INPUTS} features, got {}",
            features.len()
        )));
    }
    let (out, next) = net.lstm.step(tape, features, state)?;
    *state = next;
    Ok(GeneralizedForce([out[0], out[1], out[2], out[3]]))
}

/// MLP predicting the rod-length change from
/// `[θ, φ, ẋ, ẏ, θ̇, φ̇, F_self(4), M, l]`, forces in [`FORCE_UNIT`] and mass
/// in [`MASS_UNIT`]. The output is scaled by [`ROD_STEP_UNIT`].
#[derive(Debug, Clone)]
pub struct RodNet {
    pub mlp: Mlp,
}

impl RodNet {
    pub fn new(ids: &mut ParamIds, rng: &mut impl Rng) -> Self {
        let [h0, h1] = ROD_NET_HIDDEN;
        RodNet {
            mlp: Mlp::new(ids, "rod", &[ROD_NET_INPUTS, h0, h1, 1], rng),
        }
    }

    pub fn features<'t>(
        state: &IpmState<Var<'t>>,
        vel: &IpmVelocity<Var<'t>>,
        self_force: &GeneralizedForce<Var<'t>>,
        mass: Var<'t>,
        l: Var<'t>,
    ) -> Vec<Var<'t>> {
        let mut f = vec![state.theta, state.phi, vel.x, vel.y, vel.theta, vel.phi];
        f.extend(self_force.0.iter().map(|&v| v / FORCE_UNIT));
        f.push(mass / MASS_UNIT);
        f.push(l);
        f
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.mlp.params_mut()
    }
}

/// `l' = clamp(l + Δl, l_min, l_max)`
pub fn rod_length_update<'t>(
    net: &RodNet,
    tape: &'t Tape,
    features: &[Var<'t>],
    l: Var<'t>,
    limits: &RodLimits,
) -> Result<Var<'t>> {
    if features.len() != ROD_NET_INPUTS {
        return Err(Error::Shape(format!(
            "rod net expects {ROD_NET_INPUTS} features, got {}",
            features.len()
        )));
    }
    let dl = net.mlp.forward(tape, features)?[0] * ROD_STEP_UNIT;
    Ok(limits.clamp(l + dl))
}
