//! Multi-agent rollouts.
//!
//! Every frame all forces are computed from one snapshot of the world, then
//! each agent's rod length is updated and its pendulum integrated. The same
//! code runs on a recording tape for training and on an inert tape for plain
//! simulation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{sum, Tape, Var};
use crate::controllers::{
    friction_force, pd_force, rod_length_update, PdGains, RodNet, SelfForceNet,
};
use crate::error::{Error, Result};
use crate::interaction::{interaction_force, neighborhood, rotate, AgentView, InteractionParams};
use crate::io::fmt_f64;
use crate::ipm::{
    cartesian_to_generalized, check_angles, step_with_force, ApplyAt, BodyParams, GeneralizedForce,
    IpmState, IpmVelocity, RodLimits, DEFAULT_GRAVITY, DEFAULT_MASS,
};
use crate::models::{Models, ParamGroup};
use crate::nn::LstmState;

pub const DEFAULT_DT: f64 = 1.0 / 60.0;
/// Rod length of an agent that does not state one.
pub const DEFAULT_ROD_LENGTH: f64 = 0.9;

fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_substeps() -> usize {
    1
}
fn default_gravity() -> f64 {
    DEFAULT_GRAVITY
}
fn default_mass() -> f64 {
    DEFAULT_MASS
}
fn default_rod_length() -> f64 {
    DEFAULT_ROD_LENGTH
}

/// Single-person dynamics ignore neighbors entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    #[default]
    Multi,
}

/// Switches for the individual force terms. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceTerms {
    pub pd: bool,
    pub self_nn: bool,
    pub friction: bool,
    pub interaction: bool,
    pub input: bool,
    /// Let the rod network change the rod length.
    pub rod: bool,
}

impl Default for ForceTerms {
    fn default() -> Self {
        ForceTerms {
            pd: true,
            self_nn: true,
            friction: true,
            interaction: true,
            input: true,
            rod: true,
        }
    }
}

impl ForceTerms {
    pub fn none() -> Self {
        ForceTerms {
            pd: false,
            self_nn: false,
            friction: false,
            interaction: false,
            input: false,
            rod: false,
        }
    }
}

/// Initial condition of one agent.
///
/// `x`, `y` are world coordinates of the cart; the generalized coordinates
/// of the agent live in its own frame, rotated by `yaw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentInit {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub phi: f64,
    /// `[ẋ, ẏ, θ̇, φ̇]` in the agent's frame.
    #[serde(default)]
    pub velocity: [f64; 4],
    #[serde(default = "default_rod_length")]
    pub l0: f64,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl AgentInit {
    pub fn at(id: usize, x: f64, y: f64) -> Self {
        AgentInit {
            id,
            x,
            y,
            theta: 0.0,
            phi: 0.0,
            velocity: [0.0; 4],
            l0: DEFAULT_ROD_LENGTH,
            mass: DEFAULT_MASS,
            yaw: 0.0,
        }
    }

    /// Generalized coordinates in the agent's own frame.
    pub fn state(&self) -> IpmState {
        let [x, y] =
            rotate([Var::constant(self.x), Var::constant(self.y)], -self.yaw).map(Var::value);
        IpmState {
            x,
            y,
            theta: self.theta,
            phi: self.phi,
        }
    }
}

/// A Cartesian push in the agent's frame, active for frames
/// `start..start + duration`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushEvent {
    pub agent: usize,
    pub start: usize,
    pub duration: usize,
    /// Newtons.
    pub force: [f64; 3],
    #[serde(default)]
    pub at: ApplyAt,
}

impl PushEvent {
    pub fn active(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Number of integration frames; the trajectory has `horizon + 1`.
    pub horizon: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Integration steps per frame, each with freshly computed forces.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    pub agents: Vec<AgentInit>,
    #[serde(default)]
    pub pushes: Vec<PushEvent>,
    #[serde(default)]
    pub gains: PdGains,
    #[serde(default)]
    pub interaction: InteractionParams,
    #[serde(default)]
    pub rod_limits: RodLimits,
    #[serde(default)]
    pub terms: ForceTerms,
}

impl Scenario {
    pub fn new(name: impl Into<String>, horizon: usize, agents: Vec<AgentInit>) -> Self {
        Scenario {
            name: name.into(),
            horizon,
            dt: DEFAULT_DT,
            substeps: 1,
            mode: Mode::Multi,
            gravity: DEFAULT_GRAVITY,
            agents,
            pushes: Vec::new(),
            gains: PdGains::default(),
            interaction: InteractionParams::default(),
            rod_limits: RodLimits::default(),
            terms: ForceTerms::default(),
        }
    }

    /// Parse TOML, applying `key=value` overrides with dotted keys
    /// (`agents.0.mass=80`) before validation.
    pub fn parse(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            message,
        };
        let scenario: Scenario = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| parse_err(e.to_string()))?
        } else {
            let mut doc: toml::Value =
                toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
            for o in overrides {
                apply_override(&mut doc, o)?;
            }
            Scenario::deserialize(doc).map_err(|e| parse_err(e.to_string()))?
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = crate::io::read_to_string(path)?;
        Scenario::parse(&text, &path.display().to_string(), overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn config_hash(&self) -> String {
        crate::io::sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation(
                "dt",
                format!("{} is not positive", self.dt),
            ));
        }
        if self.substeps == 0 {
            return Err(Error::validation("substeps", "must be at least 1"));
        }
        if !self.gravity.is_finite() {
            return Err(Error::validation("gravity", "must be finite"));
        }
        if self.agents.is_empty() {
            return Err(Error::validation(
                "agents",
                "at least one agent is required",
            ));
        }
        self.gains.validate()?;
        self.interaction.validate()?;
        let lim = self.rod_limits;
        if !(lim.min > 0.0 && lim.min < lim.max && lim.max.is_finite()) {
            return Err(Error::validation(
                "rod_limits",
                format!("[{}, {}] is not a valid range", lim.min, lim.max),
            ));
        }
        let mut ids = BTreeSet::new();
        for (i, a) in self.agents.iter().enumerate() {
            let field = |f: &str| format!("agents[{i}].{f}");
            if !ids.insert(a.id) {
                return Err(Error::validation(
                    field("id"),
                    format!("duplicate id {}", a.id),
                ));
            }
            let numbers = [a.x, a.y, a.theta, a.phi, a.yaw]
                .into_iter()
                .chain(a.velocity);
            if numbers.into_iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(
                    field("state"),
                    "all coordinates must be finite",
                ));
            }
            if !(a.mass > 0.0 && a.mass.is_finite()) {
                return Err(Error::validation(
                    field("mass"),
                    format!("{} is not positive", a.mass),
                ));
            }
            if !lim.contains(a.l0) {
                return Err(Error::validation(
                    field("l0"),
                    format!("{} outside [{}, {}]", a.l0, lim.min, lim.max),
                ));
            }
            check_angles(a.theta, a.phi).map_err(|_| {
                Error::validation(field("theta"), "angle beyond the singularity margin")
            })?;
        }
        for (i, p) in self.pushes.iter().enumerate() {
            let field = |f: &str| format!("pushes[{i}].{f}");
            if !ids.contains(&p.agent) {
                return Err(Error::validation(
                    field("agent"),
                    format!("no agent with id {}", p.agent),
                ));
            }
            if p.duration == 0 {
                return Err(Error::validation(
                    field("duration"),
                    "must be at least 1 frame",
                ));
            }
            if p.force.iter().any(|f| !f.is_finite()) {
                return Err(Error::validation(field("force"), "must be finite"));
            }
        }
        Ok(())
    }

    /// The same scene reflected through the `x` axis.
    pub fn mirrored_y(&self) -> Scenario {
        let mut s = self.clone();
        for a in &mut s.agents {
            a.y = -a.y;
            a.phi = -a.phi;
            a.velocity[1] = -a.velocity[1];
            a.velocity[3] = -a.velocity[3];
            a.yaw = -a.yaw;
        }
        for p in &mut s.pushes {
            p.force[1] = -p.force[1];
        }
        s
    }

    /// Agents reordered so that new position `i` holds old agent `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Scenario {
        let mut s = self.clone();
        s.agents = order.iter().map(|&i| self.agents[i].clone()).collect();
        s
    }

    fn index_of(&self, id: usize) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }
}

/// Set `key` (dotted, array elements by number) in a TOML document. The value
/// is parsed as TOML and kept as a string when that fails.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation("override", format!("{assignment:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let bad = |m: String| Error::validation(format!("override {key}"), m);
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        node = match node {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| bad(format!("{part:?} is not an index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(i)
                    .ok_or_else(|| bad(format!("index {i} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(bad(format!("{part:?} is below a scalar"))),
        };
    }
    Err(bad("empty key".into()))
}

/// The force terms acting on one agent in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ForceBreakdown<T = f64> {
    pub net: GeneralizedForce<T>,
    pub pd: GeneralizedForce<T>,
    pub nn: GeneralizedForce<T>,
    pub friction: GeneralizedForce<T>,
    pub interaction: GeneralizedForce<T>,
    pub input: GeneralizedForce<T>,
}

impl<'t> ForceBreakdown<Var<'t>> {
    pub fn values(&self) -> ForceBreakdown {
        ForceBreakdown {
            net: self.net.values(),
            pd: self.pd.values(),
            nn: self.nn.values(),
            friction: self.friction.values(),
            interaction: self.interaction.values(),
            input: self.input.values(),
        }
    }
}

impl ForceBreakdown {
    fn terms(&self) -> [&GeneralizedForce; 6] {
        [
            &self.net,
            &self.pd,
            &self.nn,
            &self.friction,
            &self.interaction,
            &self.input,
        ]
    }
}

/// One agent at one frame, on the tape.
#[derive(Debug, Clone)]
pub struct AgentFrame<'t> {
    pub state: IpmState<Var<'t>>,
    pub vel: IpmVelocity<Var<'t>>,
    pub l: Var<'t>,
    /// Forces acting from this frame to the next.
    pub forces: ForceBreakdown<Var<'t>>,
}

/// One agent at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AgentRecord {
    pub state: IpmState,
    pub vel: IpmVelocity,
    pub l: f64,
    pub forces: ForceBreakdown,
}

impl From<&AgentFrame<'_>> for AgentRecord {
    fn from(f: &AgentFrame<'_>) -> Self {
        AgentRecord {
            state: f.state.values(),
            vel: f.vel.values(),
            l: f.l.value(),
            forces: f.forces.values(),
        }
    }
}

/// States and forces of every agent, `frames[t][n]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub dt: f64,
    pub agent_ids: Vec<usize>,
    pub frames: Vec<Vec<AgentRecord>>,
}

impl Trajectory {
    pub fn agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The record sequence of agent index `n`.
    pub fn agent(&self, n: usize) -> impl Iterator<Item = &AgentRecord> + '_ {
        self.frames.iter().map(move |f| &f[n])
    }
}

/// Result of [`simulate`]: a failed rollout keeps every completed frame.
#[derive(Debug)]
pub struct Simulation {
    pub trajectory: Trajectory,
    pub failure: Option<Error>,
    /// Pair evaluations whose semi-minor axis had to be clamped.
    pub clamped_pairs: usize,
}

impl Simulation {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RolloutStats {
    pub clamped_pairs: usize,
}

struct AgentSim<'t> {
    state: IpmState<Var<'t>>,
    vel: IpmVelocity<Var<'t>>,
    l: Var<'t>,
    prev_acc: [Var<'t>; 2],
    lstm: LstmState<'t>,
    body: BodyParams<Var<'t>>,
    yaw: f64,
}

/// Run `scenario` on `tape`, calling `visit` with every frame `0..=horizon`.
///
/// On failure the error is returned after the frames that completed were
/// visited. Singularities carry the agent id and the frame they would have
/// occurred in.
pub fn rollout<'t>(
    tape: &'t Tape,
    scenario: &Scenario,
    models: &Models,
    visit: &mut dyn FnMut(usize, &[AgentFrame<'t>]) -> Result<()>,
) -> Result<RolloutStats> {
    rollout_for(
        tape,
        scenario,
        models,
        &ParamGroup::ALL.into_iter().collect(),
        visit,
    )
}

/// Like [`rollout`], recording gradients only for the groups in `train`.
///
/// A network outside `train` whose output head is zero contributes exactly
/// nothing, so it is not evaluated at all.
pub fn rollout_for<'t>(
    tape: &'t Tape,
    scenario: &Scenario,
    models: &Models,
    train: &BTreeSet<ParamGroup>,
    visit: &mut dyn FnMut(usize, &[AgentFrame<'t>]) -> Result<()>,
) -> Result<RolloutStats> {
    scenario.validate()?;
    let active = Active {
        self_nn: scenario.terms.self_nn
            && net_active(
                tape,
                train,
                ParamGroup::SelfNet,
                models.self_net.lstm.head_is_zero(),
            ),
        rod: scenario.terms.rod
            && net_active(
                tape,
                train,
                ParamGroup::RodNet,
                models.rod_net.mlp.head_is_zero(),
            ),
        inta: net_active(
            tape,
            train,
            ParamGroup::InteractionNet,
            models.inta_net.is_inactive(),
        ),
    };
    let mu = models.friction.mu(tape);
    let mut agents: Vec<AgentSim<'t>> = scenario
        .agents
        .iter()
        .map(|a| AgentSim {
            state: a.state().lift(),
            vel: IpmVelocity::from_array(a.velocity).lift(),
            l: Var::constant(a.l0),
            prev_acc: [Var::constant(0.0); 2],
            lstm: models.self_net.initial_state(),
            body: BodyParams {
                mass: a.mass,
                gravity: scenario.gravity,
            }
            .lift(),
            yaw: a.yaw,
        })
        .collect();
    // Neighbor contributions are summed in id order so that relabeling the
    // agents permutes the results exactly.
    let ids: Vec<usize> = scenario.agents.iter().map(|a| a.id).collect();
    let pushes: Vec<(usize, &PushEvent)> = scenario
        .pushes
        .iter()
        .map(|p| (scenario.index_of(p.agent).expect("validated"), p))
        .collect();
    let dt = scenario.dt / scenario.substeps as f64;
    let mut stats = RolloutStats::default();

    for t in 0..=scenario.horizon {
        for sub in 0..scenario.substeps {
            let forces = frame_forces(
                tape,
                scenario,
                models,
                active,
                mu,
                &mut agents,
                &ids,
                &pushes,
                t,
                &mut stats,
            )?;
            if sub == 0 {
                let frames: Vec<AgentFrame<'t>> = agents
                    .iter()
                    .zip(&forces)
                    .map(|(a, f)| AgentFrame {
                        state: a.state,
                        vel: a.vel,
                        l: a.l,
                        forces: *f,
                    })
                    .collect();
                visit(t, &frames)?;
            }
            if t == scenario.horizon {
                break;
            }
            let mut next_l = Vec::with_capacity(agents.len());
            for (a, f) in agents.iter().zip(&forces) {
                next_l.push(if active.rod {
                    let self_force = f.pd + f.nn;
                    let feats = RodNet::features(&a.state, &a.vel, &self_force, a.body.mass, a.l);
                    rod_length_update(&models.rod_net, tape, &feats, a.l, &scenario.rod_limits)?
                } else {
                    a.l
                });
            }
            for (n, (a, f)) in agents.iter_mut().zip(&forces).enumerate() {
                let (s, v, acc) = step_with_force(&a.state, &a.vel, a.l, &a.body, &f.net, dt)
                    .map_err(|e| match e {
                        Error::Singularity { theta, phi, .. } => Error::Singularity {
                            theta,
                            phi,
                            agent: Some(ids[n]),
                            frame: Some(t + 1),
                        },
                        other => other,
                    })?;
                a.state = s;
                a.vel = v;
                a.prev_acc = [acc.x, acc.y];
                a.l = next_l[n];
            }
        }
    }
    Ok(stats)
}

/// Which learned residuals a rollout evaluates.
#[derive(Debug, Clone, Copy)]
struct Active {
    self_nn: bool,
    rod: bool,
    inta: bool,
}

fn net_active(tape: &Tape, train: &BTreeSet<ParamGroup>, group: ParamGroup, silent: bool) -> bool {
    !silent || (tape.is_recording() && train.contains(&group))
}

#[allow(clippy::too_many_arguments)]
fn frame_forces<'t>(
    tape: &'t Tape,
    scenario: &Scenario,
    models: &Models,
    active: Active,
    mu: Var<'t>,
    agents: &mut [AgentSim<'t>],
    ids: &[usize],
    pushes: &[(usize, &PushEvent)],
    frame: usize,
    stats: &mut RolloutStats,
) -> Result<Vec<ForceBreakdown<Var<'t>>>> {
    let terms = scenario.terms;
    let zero = GeneralizedForce::zero();
    let interacting = terms.interaction && scenario.mode == Mode::Multi && agents.len() > 1;
    let positions: Vec<[f64; 2]> = agents
        .iter()
        .map(|a| rotate([a.state.x, a.state.y], a.yaw).map(Var::value))
        .collect();

    let mut out = Vec::with_capacity(agents.len());
    for n in 0..agents.len() {
        let a = &agents[n];
        let pd = if terms.pd {
            pd_force(&a.state, &a.vel, a.prev_acc, &scenario.gains)
        } else {
            zero
        };
        let friction = if terms.friction {
            friction_force(&a.vel, mu)
        } else {
            zero
        };

        let interaction = if interacting {
            let mut neigh = neighborhood(&positions, n, scenario.interaction.r_neigh);
            neigh.sort_by_key(|&j| ids[j]);
            let view = |k: usize| AgentView {
                state: &agents[k].state,
                vel: &agents[k].vel,
                yaw: agents[k].yaw,
            };
            let mut parts = Vec::with_capacity(neigh.len());
            for j in neigh {
                let pair = interaction_force(
                    tape,
                    view(n),
                    view(j),
                    active.inta.then_some(&models.inta_net),
                    &scenario.interaction,
                    scenario.dt,
                )?;
                stats.clamped_pairs += usize::from(pair.clamped);
                parts.push(pair.total());
            }
            GeneralizedForce([0, 1, 2, 3].map(|k| sum(parts.iter().map(|p| p.0[k]))))
        } else {
            zero
        };

        let input = if terms.input {
            let active: Vec<GeneralizedForce<Var<'t>>> = pushes
                .iter()
                .filter(|(i, p)| *i == n && p.active(frame))
                .map(|(_, p)| {
                    cartesian_to_generalized(&a.state, a.l, p.force.map(Var::constant), p.at)
                })
                .collect();
            GeneralizedForce([0, 1, 2, 3].map(|k| sum(active.iter().map(|p| p.0[k]))))
        } else {
            zero
        };

        let nn = if active.self_nn {
            let a = &mut agents[n];
            let feats = SelfForceNet::features(&a.state, &a.vel, a.body.mass);
            models.self_net.force(tape, &feats, &mut a.lstm)?
        } else {
            zero
        };

        let net = pd + nn + friction + interaction + input;
        out.push(ForceBreakdown {
            net,
            pd,
            nn,
            friction,
            interaction,
            input,
        });
    }
    Ok(out)
}

/// Run `scenario` without recording gradients.
///
/// Invalid scenarios are an error; numerical failures during the rollout are
/// reported in [`Simulation::failure`] alongside the frames that completed.
pub fn simulate(scenario: &Scenario, models: &Models) -> Result<Simulation> {
    scenario.validate()?;
    let tape = Tape::inert();
    let mut frames: Vec<Vec<AgentRecord>> = Vec::with_capacity(scenario.horizon + 1);
    let result = rollout(&tape, scenario, models, &mut |_, fr| {
        frames.push(fr.iter().map(AgentRecord::from).collect());
        Ok(())
    });
    let trajectory = Trajectory {
        dt: scenario.dt,
        agent_ids: scenario.agents.iter().map(|a| a.id).collect(),
        frames,
    };
    match result {
        Ok(stats) => Ok(Simulation {
            trajectory,
            failure: None,
            clamped_pairs: stats.clamped_pairs,
        }),
        Err(e) => Ok(Simulation {
            trajectory,
            failure: Some(e),
            clamped_pairs: 0,
        }),
    }
}

/// For every agent, the first frame at which `|ẋ|` peaks.
pub fn propagation_profile(traj: &Trajectory) -> Vec<usize> {
    (0..traj.agents())
        .map(|n| {
            let mut best = (0, f64::NEG_INFINITY);
            for (t, r) in traj.agent(n).enumerate() {
                let v = r.vel.x.abs();
                if v > best.1 {
                    best = (t, v);
                }
            }
            best.0
        })
        .collect()
}

/// Largest `|ẋ|` reached by every agent.
pub fn peak_speeds(traj: &Trajectory) -> Vec<f64> {
    (0..traj.agents())
        .map(|n| traj.agent(n).map(|r| r.vel.x.abs()).fold(0.0, f64::max))
        .collect()
}

const FORCE_PREFIXES: [&str; 6] = ["fnet", "fpd", "fnn", "ffric", "finta", "finput"];

pub fn csv_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "frame", "agent", "x", "y", "theta", "phi", "xdot", "ydot", "thetadot", "phidot", "l",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for p in FORCE_PREFIXES {
        h.extend((0..4).map(|i| format!("{p}_{i}")));
    }
    h
}

/// One row per frame and agent, floats with 17 significant digits.
pub fn trajectory_to_csv(traj: &Trajectory) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header()).expect("write to memory");
    for (t, frame) in traj.frames.iter().enumerate() {
        for (n, r) in frame.iter().enumerate() {
            let mut row = vec![t.to_string(), traj.agent_ids[n].to_string()];
            let nums = r
                .state
                .to_array()
                .into_iter()
                .chain(r.vel.to_array())
                .chain([r.l])
                .chain(r.forces.terms().into_iter().flat_map(|f| f.0));
            row.extend(nums.map(fmt_f64));
            w.write_record(&row).expect("write to memory");
        }
    }
    w.into_inner().expect("flush to memory")
}

pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &trajectory_to_csv(traj))
}

/// Parse the CSV written by [`trajectory_to_csv`].
pub fn trajectory_from_csv(bytes: &[u8], origin: &str, dt: f64) -> Result<Trajectory> {
    let err = |row: usize, m: String| Error::Parse {
        path: origin.to_string(),
        message: format!("row {row}: {m}"),
    };
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != csv_header() {
        return Err(err(1, "unexpected header".into()));
    }
    let mut traj = Trajectory {
        dt,
        ..Trajectory::default()
    };
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| err(row, e.to_string()))?;
        let int = |k: usize| -> Result<usize> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| err(row, format!("column {} is not an integer", header[k])))
        };
        let (t, id) = (int(0)?, int(1)?);
        let mut nums = Vec::with_capacity(rec.len() - 2);
        for k in 2..rec.len() {
            nums.push(
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| err(row, format!("column {} is not a number", header[k])))?,
            );
        }
        let four = |o: usize| [nums[o], nums[o + 1], nums[o + 2], nums[o + 3]];
        let force = |k: usize| GeneralizedForce(four(9 + 4 * k));
        let record = AgentRecord {
            state: IpmState::from_array(four(0)),
            vel: IpmVelocity::from_array(four(4)),
            l: nums[8],
            forces: ForceBreakdown {
                net: force(0),
                pd: force(1),
                nn: force(2),
                friction: force(3),
                interaction: force(4),
                input: force(5),
            },
        };
        if t == traj.frames.len() {
            if t > 0 && traj.frames[t - 1].len() != traj.agent_ids.len() {
                return Err(err(row, format!("frame {} is incomplete", t - 1)));
            }
            traj.frames.push(Vec::new());
        } else if t + 1 != traj.frames.len() {
            return Err(err(row, format!("frame {t} out of order")));
        }
        let frame = traj.frames.last_mut().expect("pushed");
        let n = frame.len();
        if t == 0 {
            traj.agent_ids.push(id);
        } else if traj.agent_ids.get(n) != Some(&id) {
            return Err(err(row, format!("agent {id} out of order in frame {t}")));
        }
        frame.push(record);
    }
    if traj
        .frames
        .last()
        .is_some_and(|f| f.len() != traj.agent_ids.len())
    {
        return Err(err(0, "last frame is incomplete".into()));
    }
    Ok(traj)
}

pub fn read_trajectory_csv(path: &Path, dt: f64) -> Result<Trajectory> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    trajectory_from_csv(&bytes, &path.display().to_string(), dt)
}
