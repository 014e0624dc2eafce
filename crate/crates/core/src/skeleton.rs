//! Full-body poses, the pose-to-pendulum mapping and pose error metrics.
//!
//! Poses are world coordinates in meters with `z` up. The skeleton topology
//! (joint names, tree, feet) comes from a config file; a default 22-joint
//! humanoid ships with the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::interaction::rotate;
use crate::ipm::{IpmState, IpmVelocity};

pub const JOINT_COUNT: usize = 22;
/// Default foot height below which a foot counts as touching the ground.
pub const DEFAULT_FOOT_HEIGHT: f64 = 0.05;

const DEFAULT_TOPOLOGY: &str = include_str!("../data/skeleton22.toml");

/// One body: every joint position in meters.
pub type Pose = [[f64; 3]; JOINT_COUNT];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyFile {
    joints: Vec<String>,
    parents: Vec<i64>,
    hip: String,
    left_ankle: String,
    right_ankle: String,
    feet: Vec<String>,
}

/// Joint names, the bone tree and the joints the mapping and metrics need.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTopology {
    pub joints: Vec<String>,
    /// `(parent, child)` pairs.
    pub bones: Vec<(usize, usize)>,
    pub hip: usize,
    pub left_ankle: usize,
    pub right_ankle: usize,
    pub feet: Vec<usize>,
}

impl Default for SkeletonTopology {
    fn default() -> Self {
        SkeletonTopology::parse(DEFAULT_TOPOLOGY, "<builtin skeleton22>")
            .expect("bundled topology is valid")
    }
}

impl SkeletonTopology {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: TopologyFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.into(),
            message: e.to_string(),
        })?;
        if file.joints.len() != JOINT_COUNT {
            return Err(Error::validation(
                "joints",
                format!("expected {JOINT_COUNT} joints, got {}", file.joints.len()),
            ));
        }
        if file.parents.len() != JOINT_COUNT {
            return Err(Error::validation(
                "parents",
                "one parent per joint required",
            ));
        }
        let index = |name: &str, field: &str| {
            file.joints
                .iter()
                .position(|j| j == name)
                .ok_or_else(|| Error::validation(field, format!("unknown joint `{name}`")))
        };
        let mut bones = Vec::new();
        let mut roots = 0;
        for (child, &p) in file.parents.iter().enumerate() {
            if p < 0 {
                roots += 1;
                continue;
            }
            let p = p as usize;
            if p >= JOINT_COUNT || p == child {
                return Err(Error::validation(
                    "parents",
                    format!("bad parent {p} of joint {child}"),
                ));
            }
            bones.push((p, child));
        }
        if roots != 1 {
            return Err(Error::validation(
                "parents",
                format!("expected one root, found {roots}"),
            ));
        }
        let topo = SkeletonTopology {
            hip: index(&file.hip, "hip")?,
            left_ankle: index(&file.left_ankle, "left_ankle")?,
            right_ankle: index(&file.right_ankle, "right_ankle")?,
            feet: file
                .feet
                .iter()
                .map(|f| index(f, "feet"))
                .collect::<Result<_>>()?,
            joints: file.joints,
            bones,
        };
        topo.check_tree()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(
            &crate::io::read_to_string(path)?,
            &path.display().to_string(),
        )
    }

    /// Every joint must be reachable from the root exactly once.
    fn check_tree(&self) -> Result<()> {
        let root = (0..JOINT_COUNT)
            .find(|j| self.bones.iter().all(|b| b.1 != *j))
            .ok_or_else(|| Error::validation("parents", "no root"))?;
        let mut seen = BTreeSet::from([root]);
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            for &(_, c) in self.bones.iter().filter(|b| b.0 == j) {
                if !seen.insert(c) {
                    return Err(Error::validation(
                        "parents",
                        format!("joint {c} reached twice"),
                    ));
                }
                stack.push(c);
            }
        }
        if seen.len() != JOINT_COUNT {
            return Err(Error::validation(
                "parents",
                "bones do not connect every joint",
            ));
        }
        Ok(())
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }
}

/// Poses of every agent over time, `frames[t][n]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseTrajectory {
    pub dt: f64,
    pub agent_ids: Vec<usize>,
    pub frames: Vec<Vec<Pose>>,
}

impl PoseTrajectory {
    pub fn agents(&self) -> usize {
        self.agent_ids.len()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn check_shape(&self) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != self.agents() {
                return Err(Error::Shape(format!(
                    "frame {t} has {} agents, expected {}",
                    f.len(),
                    self.agents()
                )));
            }
        }
        Ok(())
    }
}

fn check_pose(pose: &Pose) -> Result<()> {
    if pose.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("pose".into()))
    }
}

/// Pendulum state of a pose: the cart sits at the ankle midpoint on the
/// ground, the point mass at the hip. Coordinates are expressed in the frame
/// rotated by `yaw`, the convention the simulator uses.
pub fn skeleton_to_ipm(
    pose: &Pose,
    topo: &SkeletonTopology,
    yaw: f64,
    l_min: f64,
) -> Result<(IpmState, f64)> {
    check_pose(pose)?;
    let (la, ra, hip) = (
        pose[topo.left_ankle],
        pose[topo.right_ankle],
        pose[topo.hip],
    );
    let local = |p: [f64; 2]| rotate(p.map(Var::constant), -yaw).map(Var::value);
    let cart = local([(la[0] + ra[0]) / 2.0, (la[1] + ra[1]) / 2.0]);
    let h = local([hip[0], hip[1]]);
    let d = [h[0] - cart[0], h[1] - cart[1], hip[2]];
    let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !(l >= l_min) {
        return Err(Error::validation(
            "pose",
            format!("hip {l:.4} m from cart, below {l_min} m"),
        ));
    }
    let state = IpmState {
        x: cart[0],
        y: cart[1],
        theta: (d[0] / l).asin(),
        phi: (-d[1]).atan2(d[2]),
    };
    Ok((state, l))
}

/// A stick pose carrying exactly the given pendulum configuration: hip at
/// the rod end, ankles `stance` apart sideways around the cart, every other
/// joint spread along the rod. The inverse of [`skeleton_to_ipm`].
pub fn pose_from_ipm(
    state: &IpmState,
    l: f64,
    yaw: f64,
    topo: &SkeletonTopology,
    stance: f64,
) -> Pose {
    let (st, ct) = state.theta.sin_cos();
    let (sp, cp) = state.phi.sin_cos();
    let rod = [l * st, -l * ct * sp, l * ct * cp];
    let world = |p: [f64; 3]| {
        let [x, y] = rotate([Var::constant(p[0]), Var::constant(p[1])], yaw).map(Var::value);
        [x, y, p[2]]
    };
    let mut pose = [[0.0; 3]; JOINT_COUNT];
    for (j, p) in pose.iter_mut().enumerate() {
        // Fixed fraction along the rod so every bone has a constant length
        // when l is constant.
        let s = 0.2 + 1.5 * (j as f64 + 1.0) / JOINT_COUNT as f64;
        *p = world([state.x + s * rod[0], state.y + s * rod[1], s * rod[2]]);
    }
    pose[topo.hip] = world([state.x + rod[0], state.y + rod[1], rod[2]]);
    pose[topo.left_ankle] = world([state.x, state.y + stance / 2.0, 0.0]);
    pose[topo.right_ankle] = world([state.x, state.y - stance / 2.0, 0.0]);
    pose
}

/// Pendulum velocities by central differences of the mapped states, one
/// sided at both ends. `yaws[n]` is the frame of agent `n`.
pub fn ipm_velocity_estimate(
    traj: &PoseTrajectory,
    topo: &SkeletonTopology,
    yaws: &[f64],
    l_min: f64,
) -> Result<Vec<Vec<IpmVelocity>>> {
    traj.check_shape()?;
    if traj.len() < 2 {
        return Err(Error::validation("poses", "at least two frames needed"));
    }
    if yaws.len() != traj.agents() {
        return Err(Error::Shape(format!(
            "{} yaws for {} agents",
            yaws.len(),
            traj.agents()
        )));
    }
    let states: Vec<Vec<[f64; 4]>> = traj
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .zip(yaws)
                .map(|(p, &yaw)| skeleton_to_ipm(p, topo, yaw, l_min).map(|(s, _)| s.to_array()))
                .collect()
        })
        .collect::<Result<_>>()?;
    let last = states.len() - 1;
    Ok((0..=last)
        .map(|t| {
            let (a, b, span) = match t {
                0 => (0, 1, 1.0),
                t if t == last => (last - 1, last, 1.0),
                t => (t - 1, t + 1, 2.0),
            };
            (0..traj.agents())
                .map(|n| {
                    IpmVelocity::from_array(
                        [0, 1, 2, 3]
                            .map(|k| (states[b][n][k] - states[a][n][k]) / (span * traj.dt)),
                    )
                })
                .collect()
        })
        .collect())
}

/// The five pose error metrics. The first four are in meters, `fse` in
/// centimeters per frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub mpjpe: f64,
    pub hip_ade: f64,
    pub hip_fde: f64,
    pub mble: f64,
    pub fse: f64,
    /// Foot height threshold the foot-skating error used, meters.
    pub foot_height: f64,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Compare `pred` against `gt`.
///
/// Foot skating looks at the predicted feet only: every foot joint at every
/// frame after the first whose height is below `foot_height` contributes its
/// horizontal displacement since the previous frame, weighted by
/// `2 - 2^(h/H)`. The result is the mean over those foot-frames.
pub fn evaluate_metrics(
    pred: &PoseTrajectory,
    gt: &PoseTrajectory,
    topo: &SkeletonTopology,
    foot_height: f64,
) -> Result<PoseMetrics> {
    pred.check_shape()?;
    gt.check_shape()?;
    if pred.len() != gt.len() || pred.agents() != gt.agents() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth {}x{} (frames x agents)",
            pred.len(),
            pred.agents(),
            gt.len(),
            gt.agents()
        )));
    }
    if !(foot_height > 0.0) {
        return Err(Error::validation("foot_height", "must be positive"));
    }
    let (frames, agents) = (gt.len(), gt.agents());
    let (mut joint_err, mut hip_err, mut bone_err) = (0.0, 0.0, 0.0);
    for (pf, gf) in pred.frames.iter().zip(&gt.frames) {
        for (p, g) in pf.iter().zip(gf) {
            joint_err += p.iter().zip(g).map(|(a, b)| dist(a, b)).sum::<f64>();
            hip_err += dist(&p[topo.hip], &g[topo.hip]);
            bone_err += topo
                .bones
                .iter()
                .map(|&(a, b)| (dist(&g[a], &g[b]) - dist(&p[a], &p[b])).abs())
                .sum::<f64>();
        }
    }
    let hip_final = match (pred.frames.last(), gt.frames.last()) {
        (Some(pf), Some(gf)) => pf
            .iter()
            .zip(gf)
            .map(|(p, g)| dist(&p[topo.hip], &g[topo.hip]))
            .sum(),
        _ => 0.0,
    };

    let (mut skate, mut contacts) = (0.0, 0);
    for t in 1..frames {
        for n in 0..agents {
            for &f in &topo.feet {
                let [x, y, h] = pred.frames[t][n][f];
                if h < foot_height {
                    let prev = pred.frames[t - 1][n][f];
                    let v = ((x - prev[0]).powi(2) + (y - prev[1]).powi(2)).sqrt();
                    skate += v * (2.0 - 2f64.powf(h / foot_height));
                    contacts += 1;
                }
            }
        }
    }

    Ok(PoseMetrics {
        mpjpe: mean(joint_err, frames * agents * JOINT_COUNT),
        hip_ade: mean(hip_err, frames * agents),
        hip_fde: mean(hip_final, agents),
        mble: mean(bone_err, frames * agents * topo.bones.len()),
        fse: 100.0 * mean(skate, contacts),
        foot_height,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    frame: usize,
    agent: usize,
    joint: usize,
    x: f64,
    y: f64,
    z: f64,
}

/// Long format: one `frame,agent,joint,x,y,z` row per joint.
pub fn poses_to_csv(traj: &PoseTrajectory) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["frame", "agent", "joint", "x", "y", "z"])
        .expect("in-memory write");
    for (t, frame) in traj.frames.iter().enumerate() {
        for (pose, id) in frame.iter().zip(&traj.agent_ids) {
            for (j, p) in pose.iter().enumerate() {
                let mut rec = vec![t.to_string(), id.to_string(), j.to_string()];
                rec.extend(p.iter().map(|v| crate::io::fmt_f64(*v)));
                w.write_record(&rec).expect("in-memory write");
            }
        }
    }
    w.into_inner().expect("in-memory write")
}

pub fn write_poses_csv(traj: &PoseTrajectory, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &poses_to_csv(traj))
}

/// Parse the long pose format. Frames must be numbered from 0 without gaps
/// and every frame must hold all joints of the same agents.
pub fn poses_from_csv(bytes: &[u8], origin: &str, dt: f64) -> Result<PoseTrajectory> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: format!("{origin}:{line}"),
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut cells: BTreeMap<(usize, usize), [Option<[f64; 3]>; JOINT_COUNT]> = BTreeMap::new();
    for row in r.deserialize::<PoseRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        if row.joint >= JOINT_COUNT {
            return Err(parse_err(
                r.position().line(),
                format!("joint {} out of range", row.joint),
            ));
        }
        if ![row.x, row.y, row.z].iter().all(|v| v.is_finite()) {
            return Err(parse_err(
                r.position().line(),
                "non-finite coordinate".into(),
            ));
        }
        let slot = &mut cells
            .entry((row.frame, row.agent))
            .or_insert([None; JOINT_COUNT])[row.joint];
        if slot.is_some() {
            return Err(parse_err(
                r.position().line(),
                format!(
                    "duplicate joint {} of agent {} in frame {}",
                    row.joint, row.agent, row.frame
                ),
            ));
        }
        *slot = Some([row.x, row.y, row.z]);
    }
    let agent_ids: Vec<usize> = cells
        .keys()
        .map(|k| k.1)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let frame_count = cells.keys().map(|k| k.0 + 1).max().unwrap_or(0);
    let mut frames = Vec::with_capacity(frame_count);
    for t in 0..frame_count {
        let mut frame = Vec::with_capacity(agent_ids.len());
        for &a in &agent_ids {
            let joints = cells
                .get(&(t, a))
                .ok_or_else(|| parse_err(0, format!("agent {a} missing in frame {t}")))?;
            let mut pose = [[0.0; 3]; JOINT_COUNT];
            for (j, p) in joints.iter().enumerate() {
                pose[j] = p.ok_or_else(|| {
                    parse_err(0, format!("joint {j} of agent {a} missing in frame {t}"))
                })?;
            }
            frame.push(pose);
        }
        frames.push(frame);
    }
    Ok(PoseTrajectory {
        dt,
        agent_ids,
        frames,
    })
}

pub fn read_poses_csv(path: &Path, dt: f64) -> Result<PoseTrajectory> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    poses_from_csv(&bytes, &path.display().to_string(), dt)
}

/// How to read an externally prepared wide pose table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertOptions {
    /// Multiplier to meters, e.g. `0.001` for millimeters.
    pub scale: f64,
    /// Source data has `y` up instead of `z` up.
    pub y_up: bool,
    /// Source joint name to topology joint name. Unmapped names are used as is.
    pub joint_map: BTreeMap<String, String>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            scale: 1.0,
            y_up: false,
            joint_map: BTreeMap::new(),
        }
    }
}

/// Convert a wide table (`frame`, optional `agent`, then `<joint>_x`,
/// `<joint>_y`, `<joint>_z` columns) into a pose trajectory. Columns of
/// joints the topology does not know are ignored.
pub fn convert_wide_csv(
    bytes: &[u8],
    origin: &str,
    topo: &SkeletonTopology,
    opts: &ConvertOptions,
    dt: f64,
) -> Result<PoseTrajectory> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: format!("{origin}:{line}"),
        message,
    };
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = r
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    let frame_col = col("frame").ok_or_else(|| parse_err(1, "missing `frame` column".into()))?;
    let agent_col = col("agent");

    let mut columns: [Option<[usize; 3]>; JOINT_COUNT] = [None; JOINT_COUNT];
    for (k, h) in header.iter().enumerate() {
        let Some(source) = h.strip_suffix("_x") else {
            continue;
        };
        let target = opts.joint_map.get(source).map_or(source, String::as_str);
        let Some(j) = topo.joint_index(target) else {
            continue;
        };
        let (Some(y), Some(z)) = (col(&format!("{source}_y")), col(&format!("{source}_z"))) else {
            return Err(parse_err(
                1,
                format!("joint `{source}` lacks _y or _z column"),
            ));
        };
        columns[j] = Some([k, y, z]);
    }
    if let Some(j) = columns.iter().position(Option::is_none) {
        return Err(parse_err(
            1,
            format!("no columns for joint `{}`", topo.joints[j]),
        ));
    }

    let mut out = Vec::new();
    for rec in r.records() {
        let rec =
            rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("column `{}`: {e}", &header[k])))
        };
        let int = |k: usize| -> Result<usize> {
            rec.get(k)
                .unwrap_or("")
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("column `{}`: {e}", &header[k])))
        };
        let frame = int(frame_col)?;
        let agent = agent_col.map(int).transpose()?.unwrap_or(0);
        for (j, c) in columns.iter().enumerate() {
            let [cx, cy, cz] = c.expect("checked above");
            let (x, y, z) = (
                num(cx)? * opts.scale,
                num(cy)? * opts.scale,
                num(cz)? * opts.scale,
            );
            let p = if opts.y_up { [x, -z, y] } else { [x, y, z] };
            out.push(PoseRow {
                frame,
                agent,
                joint: j,
                x: p[0],
                y: p[1],
                z: p[2],
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &out {
        w.serialize(row).expect("in-memory write");
    }
    poses_from_csv(&w.into_inner().expect("in-memory write"), origin, dt)
}
