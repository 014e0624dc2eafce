//! Fitting the learnable parameters through the simulator.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sum, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ipm::{ApplyAt, IpmState, IpmVelocity};
use crate::models::{Models, ParamGroup};
use crate::nn::Adam;
use crate::rng;
use crate::sim::{
    read_trajectory_csv, rollout_for, simulate, trajectory_to_csv, AgentRecord, PushEvent,
    Scenario, Trajectory,
};
use crate::skeleton::PoseTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    /// Weight of the roll-rate penalty.
    pub lambda: f64,
    /// Global gradient norm clip.
    pub clip_norm: f64,
    /// Longest sequence used, in frames after the first; longer targets are cut.
    pub max_len: usize,
    /// Sequences per optimizer step.
    pub accumulate: usize,
    pub seed: u64,
    pub frozen: BTreeSet<ParamGroup>,
    /// Per-epoch checkpoints go here, if set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Worker threads; `None` uses rayon's default.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            epochs: 1,
            max_steps: None,
            lambda: 1.0,
            clip_norm: 10.0,
            max_len: 600,
            accumulate: 4,
            seed: 0,
            frozen: BTreeSet::new(),
            checkpoint_dir: None,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::validation(f, m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        if self.accumulate == 0 {
            return bad("accumulate", "must be at least 1");
        }
        if self.max_len == 0 {
            return bad("max_len", "must be at least 1");
        }
        if self.threads == Some(0) {
            return bad("threads", "must be at least 1");
        }
        Ok(())
    }

    /// Groups that receive updates.
    pub fn trainable(&self) -> BTreeSet<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| !self.frozen.contains(g))
            .collect()
    }
}

/// One training sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub scenario: Scenario,
    pub target: Trajectory,
}

/// Where a synthetic dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub mu: f64,
    pub weights_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IpmDataset {
    pub samples: Vec<Sample>,
    pub oracle: Option<OracleInfo>,
    /// Templates whose rollout failed, with the reason.
    pub excluded: Vec<(String, String)>,
}

impl IpmDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_aligned(scenario: &Scenario, target: &Trajectory) -> Result<()> {
    if target.len() != scenario.horizon + 1 || target.agents() != scenario.agents.len() {
        return Err(Error::Shape(format!(
            "target of `{}` is {}x{}, scenario needs {}x{} (frames x agents)",
            scenario.name,
            target.len(),
            target.agents(),
            scenario.horizon + 1,
            scenario.agents.len()
        )));
    }
    if (target.dt - scenario.dt).abs() > 1e-12 {
        return Err(Error::Shape(format!(
            "target dt {} differs from scenario dt {}",
            target.dt, scenario.dt
        )));
    }
    Ok(())
}

/// Tracking error of one agent at one frame: L1 over position, angles and
/// the rates of `x`, `y`, `θ`, plus `λ|φ̇|` on the prediction itself.
pub fn frame_loss<'t>(
    state: &IpmState<Var<'t>>,
    vel: &IpmVelocity<Var<'t>>,
    target: &AgentRecord,
    lambda: f64,
) -> Var<'t> {
    let (s, v) = (&target.state, &target.vel);
    sum([
        (state.x - s.x).abs(),
        (state.y - s.y).abs(),
        (state.theta - s.theta).abs(),
        (state.phi - s.phi).abs(),
        (vel.x - v.x).abs(),
        (vel.y - v.y).abs(),
        (vel.theta - v.theta).abs(),
        vel.phi.abs() * lambda,
    ])
}

/// Mean of [`frame_loss`] over every frame and agent.
pub fn l_ipm_loss(pred: &Trajectory, target: &Trajectory, lambda: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.agents() != target.agents() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, target {}x{} (frames x agents)",
            pred.len(),
            pred.agents(),
            target.len(),
            target.agents()
        )));
    }
    let count = pred.len() * pred.agents();
    if count == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pf, tf) in pred.frames.iter().zip(&target.frames) {
        for (p, t) in pf.iter().zip(tf) {
            total += frame_loss(&p.state.lift(), &p.vel.lift(), t, lambda).value();
        }
    }
    Ok(total / count as f64)
}

/// Mean squared error over every frame, agent, joint and coordinate.
pub fn mse_pose_loss(pred: &PoseTrajectory, gt: &PoseTrajectory) -> Result<f64> {
    let shape = |p: &PoseTrajectory| (p.len(), p.frames.iter().map(Vec::len).collect::<Vec<_>>());
    if shape(pred) != shape(gt) {
        return Err(Error::Shape(
            "pose trajectories differ in frames or agents".into(),
        ));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (pf, gf) in pred.frames.iter().zip(&gt.frames) {
        for (p, g) in pf.iter().zip(gf) {
            for (a, b) in p.iter().flatten().zip(g.iter().flatten()) {
                total += (a - b) * (a - b);
                count += 1;
            }
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Loss of one rollout against its target, recorded on `tape`.
pub fn sequence_loss<'t>(
    tape: &'t Tape,
    scenario: &Scenario,
    models: &Models,
    target: &Trajectory,
    lambda: f64,
    train: &BTreeSet<ParamGroup>,
) -> Result<Var<'t>> {
    check_aligned(scenario, target)?;
    let mut terms = Vec::with_capacity(target.len() * target.agents());
    rollout_for(tape, scenario, models, train, &mut |t, frames| {
        for (f, rec) in frames.iter().zip(&target.frames[t]) {
            terms.push(frame_loss(&f.state, &f.vel, rec, lambda));
        }
        Ok(())
    })?;
    let n = terms.len().max(1) as f64;
    Ok(sum(terms) / n)
}

/// Loss and gradient of one sequence, restricted to `train`.
pub fn sequence_gradients(
    scenario: &Scenario,
    models: &Models,
    target: &Trajectory,
    lambda: f64,
    train: &BTreeSet<ParamGroup>,
) -> Result<(f64, Gradients)> {
    let tape = Tape::new();
    let loss = sequence_loss(&tape, scenario, models, target, lambda, train)?;
    let mut grads = tape.backward(loss)?;
    grads.retain(|id| models.group_of(id).is_some_and(|g| train.contains(&g)));
    Ok((loss.value(), grads))
}

/// Cut a sample to at most `max_len` integration frames.
fn truncated(sample: &Sample, max_len: usize) -> Sample {
    if sample.scenario.horizon <= max_len {
        return sample.clone();
    }
    let mut s = sample.clone();
    s.scenario.horizon = max_len;
    s.target.frames.truncate(max_len + 1);
    s
}

/// Roll out every template with the oracle parameters and keep the
/// trajectories as targets. Failed rollouts are left out and listed.
pub fn synth_dataset(oracle: &Models, templates: &[Scenario], seed: u64) -> Result<IpmDataset> {
    let mut ds = IpmDataset {
        oracle: Some(OracleInfo {
            mu: oracle.mu(),
            weights_hash: oracle.weights_hash(),
            seed,
        }),
        ..Default::default()
    };
    for (k, scenario) in templates.iter().enumerate() {
        let name = if scenario.name.is_empty() {
            format!("seq{k:03}")
        } else {
            scenario.name.clone()
        };
        let sim = simulate(scenario, oracle)?;
        match sim.failure {
            Some(e) => ds.excluded.push((name, e.to_string())),
            None => ds.samples.push(Sample {
                name,
                scenario: scenario.clone(),
                target: sim.trajectory,
            }),
        }
    }
    Ok(ds)
}

/// `count` single-agent scenarios with pushes of random size, direction,
/// start and length, drawn from `seed`.
pub fn single_agent_templates(count: usize, horizon: usize, seed: u64) -> Vec<Scenario> {
    let mut rng = rng::stream(seed, "synth.templates");
    (0..count)
        .map(|k| {
            let mut s = Scenario::new(
                format!("single{k:03}"),
                horizon,
                vec![crate::sim::AgentInit::at(0, 0.0, 0.0)],
            );
            s.mode = crate::sim::Mode::Single;
            let magnitude = rng.gen_range(300.0..1200.0);
            let angle: f64 = rng.gen_range(-0.6..0.6);
            s.pushes.push(PushEvent {
                agent: 0,
                start: rng.gen_range(0..5),
                duration: rng.gen_range(6..12),
                force: [magnitude * angle.cos(), magnitude * angle.sin(), 0.0],
                at: ApplyAt::RodEnd,
            });
            s
        })
        .collect()
}

/// One optimizer step in the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Norm of the averaged gradient before clipping.
    pub grad_norm: f64,
    /// Friction coefficient the loss was evaluated with.
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub models: Models,
    pub steps: Vec<StepLog>,
    /// Mean step loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Exponential moving average of the step losses, made non-increasing.
    pub smoothed: Vec<f64>,
}

fn smooth(losses: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut ema = None;
    let mut best = f64::INFINITY;
    losses
        .into_iter()
        .map(|l| {
            let e = ema.map_or(l, |e: f64| 0.9 * e + 0.1 * l);
            ema = Some(e);
            best = best.min(e);
            best
        })
        .collect()
}

pub fn log_csv(steps: &[StepLog]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in steps {
        w.serialize(s).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Full-sequence gradient descent with Adam.
///
/// Each step averages the gradients of `accumulate` sequences, evaluated in
/// parallel on independent tapes and summed in a fixed order, so results do
/// not depend on the number of workers. `on_step` sees every step as it
/// happens. A non-finite loss or a failed rollout aborts training; the last
/// good weights are written to `last_good.ckpt` in the checkpoint directory.
pub fn train(
    dataset: &IpmDataset,
    models: Models,
    config: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("dataset", "no samples"));
    }
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .map(|s| truncated(s, config.max_len))
        .collect();
    for s in &samples {
        check_aligned(&s.scenario, &s.target)?;
    }
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.threads {
            b = b.num_threads(n);
        }
        b.build()
            .map_err(|e| Error::validation("threads", e.to_string()))?
    };
    let train_groups = config.trainable();
    let mut models = models;
    let mut adam = Adam::new(config.lr);
    let mut order_rng = rng::stream(config.seed, "train.order");
    let mut steps = Vec::new();
    let mut epoch_losses = Vec::new();
    let max_steps = config.max_steps.unwrap_or(usize::MAX);

    let abort = |models: &Models, err: Error| -> Error {
        if let Some(dir) = &config.checkpoint_dir {
            if let Err(e) = models.save(&dir.join("last_good.ckpt")) {
                return e;
            }
        }
        err
    };

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(config.accumulate) {
            if steps.len() >= max_steps {
                break 'epochs;
            }
            let results: Vec<Result<(f64, Gradients)>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let s = &samples[i];
                        sequence_gradients(
                            &s.scenario,
                            &models,
                            &s.target,
                            config.lambda,
                            &train_groups,
                        )
                    })
                    .collect()
            });
            let mut loss = 0.0;
            let mut grads = Gradients::default();
            for r in results {
                match r {
                    Ok((l, g)) => {
                        loss += l;
                        grads.add_assign(&g);
                    }
                    Err(e) => return Err(abort(&models, e)),
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            loss *= inv;
            grads.scale(inv);
            let grad_norm = grads.global_norm();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(abort(
                    &models,
                    Error::Diverged {
                        step: steps.len(),
                        loss,
                    },
                ));
            }
            if grad_norm > config.clip_norm {
                grads.scale(config.clip_norm / grad_norm);
            }
            let log = StepLog {
                step: steps.len(),
                loss,
                grad_norm,
                mu: models.mu(),
            };
            let frozen = config.frozen.clone();
            adam.update(models.trainable_mut(&frozen), &grads)?;
            on_step(&log);
            steps.push(log);
            epoch_total += loss;
            epoch_steps += 1;
        }
        epoch_losses.push(epoch_total / epoch_steps.max(1) as f64);
        if let Some(dir) = &config.checkpoint_dir {
            models.save(&dir.join(format!("epoch{epoch:04}.ckpt")))?;
        }
    }
    let smoothed = smooth(steps.iter().map(|s| s.loss));
    Ok(TrainReport {
        models,
        steps,
        epoch_losses,
        smoothed,
    })
}

/// Two stages: first friction, self force and rod length on single-agent
/// data, then the interaction residual on multi-agent data, starting from
/// the stage-one weights. With `freeze_first` the stage-one groups stay
/// fixed during stage two.
pub fn train_staged(
    single: &IpmDataset,
    multi: &IpmDataset,
    models: Models,
    config: &TrainConfig,
    freeze_first: bool,
    on_step: &mut dyn FnMut(usize, &StepLog),
) -> Result<(TrainReport, TrainReport)> {
    let mut first = config.clone();
    first.frozen.insert(ParamGroup::InteractionNet);
    let stage1 = train(single, models, &first, &mut |s| on_step(1, s))?;

    let mut second = config.clone();
    if freeze_first {
        second.frozen.extend([
            ParamGroup::Friction,
            ParamGroup::SelfNet,
            ParamGroup::RodNet,
        ]);
    }
    let stage2 = train(multi, stage1.models.clone(), &second, &mut |s| {
        on_step(2, s)
    })?;
    Ok((stage1, stage2))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    scenario: String,
    target: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle: Option<OracleInfo>,
    #[serde(default)]
    samples: Vec<ManifestEntry>,
    #[serde(default)]
    excluded: Vec<[String; 2]>,
}

const MANIFEST: &str = "manifest.toml";

impl IpmDataset {
    /// Write `manifest.toml`, one scenario file and one target CSV per
    /// sample under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = DatasetManifest {
            oracle: self.oracle.clone(),
            samples: Vec::new(),
            excluded: self
                .excluded
                .iter()
                .map(|(a, b)| [a.clone(), b.clone()])
                .collect(),
        };
        for s in &self.samples {
            let entry = ManifestEntry {
                name: s.name.clone(),
                scenario: format!("scenarios/{}.toml", s.name),
                target: format!("targets/{}.csv", s.name),
            };
            crate::io::write_atomic(&dir.join(&entry.scenario), s.scenario.to_toml().as_bytes())?;
            crate::io::write_atomic(&dir.join(&entry.target), &trajectory_to_csv(&s.target))?;
            manifest.samples.push(entry);
        }
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| Error::validation("manifest", e.to_string()))?;
        crate::io::write_atomic(&dir.join(MANIFEST), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = crate::io::read_to_string(&path)?;
        let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut samples = Vec::new();
        for e in manifest.samples {
            let scenario = Scenario::load(&dir.join(&e.scenario), &[])?;
            let target = read_trajectory_csv(&dir.join(&e.target), scenario.dt)?;
            check_aligned(&scenario, &target)?;
            samples.push(Sample {
                name: e.name,
                scenario,
                target,
            });
        }
        Ok(IpmDataset {
            samples,
            oracle: manifest.oracle,
            excluded: manifest.excluded.into_iter().map(|[a, b]| (a, b)).collect(),
        })
    }
}
