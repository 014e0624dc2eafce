//! The `ldp` command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{self, Depth};
use crate::io::{read_to_string, sha256_hex, write_atomic};
use crate::models::Models;
use crate::scenarios;
use crate::sim::{
    apply_override, read_trajectory_csv, simulate, trajectory_to_csv, Scenario, DEFAULT_DT,
};
use crate::skeleton::{
    convert_wide_csv, evaluate_metrics, pose_from_ipm, read_poses_csv, write_poses_csv,
    ConvertOptions, PoseTrajectory, SkeletonTopology, DEFAULT_FOOT_HEIGHT,
};
use crate::training::{
    log_csv, single_agent_templates, synth_dataset, train, train_staged, IpmDataset, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(
    name = "ldp",
    version,
    about = "Differentiable multi-agent inverted-pendulum simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Configuration file of the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Override a config value, `dotted.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out a scenario and write its trajectory.
    Simulate {
        /// Use a bundled scenario instead of `--config`.
        #[arg(long)]
        bundled: Option<String>,
        /// Model weights; fresh models from `--seed` otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Fit the learnable parameters to a dataset.
    Train,
    /// Compare reverse-mode gradients against finite differences.
    Gradcheck {
        #[arg(long, value_enum)]
        depth: Option<Depth>,
    },
    /// Pose error metrics of a prediction against ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Foot height threshold in meters.
        #[arg(long, default_value_t = DEFAULT_FOOT_HEIGHT)]
        foot_height: f64,
    },
    /// Convert external pose data, or a simulator trajectory, into pose CSV.
    Convert {
        #[arg(long)]
        input: PathBuf,
        /// The input is a simulator trajectory; emit stick poses for it.
        #[arg(long)]
        ipm: bool,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 60.0)]
        fps: f64,
    },
    /// List the bundled scenarios, or write them out as files.
    Scenarios,
}

/// What every run leaves next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    /// The configuration after overrides, enough to repeat the run.
    pub effective_config: String,
    pub overrides: Vec<String>,
    pub weights_hash: Option<String>,
    pub threads: Option<usize>,
    pub outputs: Vec<String>,
    pub failure: Option<String>,
}

impl RunManifest {
    fn new(command: &str, common: &Common, effective_config: String) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: common.seed,
            config_hash: sha256_hex(effective_config.as_bytes()),
            effective_config,
            overrides: common.overrides.clone(),
            weights_hash: None,
            threads: common.threads,
            outputs: Vec::new(),
            failure: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), json.as_bytes())
    }
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| Error::validation(flag, format!("--{flag} is required")))
}

/// Run one parsed command, printing human-readable results to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::validation("threads", "must be at least 1"));
        }
        // Ignored if a pool already exists, e.g. when called twice in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    match &cli.command {
        Command::Simulate { bundled, weights } => {
            run_simulate(&cli.common, bundled.as_deref(), weights.as_deref(), out)
        }
        Command::Train => run_train(&cli.common, out),
        Command::Gradcheck { depth } => run_gradcheck(&cli.common, *depth, out),
        Command::Metrics {
            pred,
            gt,
            topology,
            foot_height,
        } => run_metrics(
            &cli.common,
            pred,
            gt,
            topology.as_deref(),
            *foot_height,
            out,
        ),
        Command::Convert {
            input,
            ipm,
            topology,
            fps,
        } => run_convert(&cli.common, input, *ipm, topology.as_deref(), *fps, out),
        Command::Scenarios => {
            for name in scenarios::NAMES {
                let s = scenarios::bundled(name).expect("listed names exist");
                writeln!(
                    out,
                    "{name:16} {} agents, {} frames",
                    s.agents.len(),
                    s.horizon
                )
                .map_err(w)?;
                if let Some(dir) = &cli.common.out {
                    write_atomic(&dir.join(format!("{name}.toml")), s.to_toml().as_bytes())?;
                }
            }
            Ok(())
        }
    }
}

fn topology(path: Option<&Path>) -> Result<SkeletonTopology> {
    path.map_or_else(|| Ok(SkeletonTopology::default()), SkeletonTopology::load)
}

pub fn run_simulate(
    common: &Common,
    bundled: Option<&str>,
    weights: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let dir = require(&common.out, "out")?;
    let scenario = match (bundled, &common.config) {
        (Some(name), None) => {
            let base = scenarios::bundled(name)
                .ok_or_else(|| Error::validation("bundled", format!("no scenario `{name}`")))?;
            Scenario::parse(&base.to_toml(), name, &common.overrides)?
        }
        (None, Some(path)) => Scenario::load(path, &common.overrides)?,
        _ => {
            return Err(Error::validation(
                "config",
                "give exactly one of --config and --bundled",
            ))
        }
    };
    let models = match weights {
        Some(p) => Models::load(p)?,
        None => Models::new(common.seed),
    };
    let sim = simulate(&scenario, &models)?;

    let effective = scenario.to_toml();
    let mut manifest = RunManifest::new("simulate", common, effective.clone());
    manifest.config_hash = scenario.config_hash();
    manifest.weights_hash = Some(models.weights_hash());
    write_atomic(&dir.join("scenario.toml"), effective.as_bytes())?;
    write_atomic(
        &dir.join("trajectory.csv"),
        &trajectory_to_csv(&sim.trajectory),
    )?;
    manifest.outputs = vec!["scenario.toml".into(), "trajectory.csv".into()];
    manifest.failure = sim.failure.as_ref().map(|e| e.to_string());
    manifest.write(dir)?;

    let w = |e: std::io::Error| Error::io("<stdout>", e);
    writeln!(
        out,
        "{}: {} frames x {} agents -> {}",
        scenario.name,
        sim.trajectory.len(),
        sim.trajectory.agents(),
        dir.join("trajectory.csv").display()
    )
    .map_err(w)?;
    if sim.clamped_pairs > 0 {
        writeln!(
            out,
            "note: {} pair evaluations used the radial fallback",
            sim.clamped_pairs
        )
        .map_err(w)?;
    }
    match sim.failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Training job file. Relative paths are taken from the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    /// Dataset directory holding a `manifest.toml`.
    pub dataset: Option<PathBuf>,
    /// Generate a synthetic single-agent dataset instead.
    pub synthetic: Option<SyntheticSpec>,
    /// Multi-agent dataset for a second stage that adds the interaction net.
    pub multi_dataset: Option<PathBuf>,
    /// Keep the first-stage groups fixed during the second stage.
    #[serde(default = "yes")]
    pub freeze_first: bool,
    /// Starting weights; fresh models from the seed otherwise.
    pub weights: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub oracle_mu: f64,
    pub count: usize,
    pub horizon: usize,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_job(path: &Path, overrides: &[String]) -> Result<(TrainJob, String)> {
    let text = read_to_string(path)?;
    let origin = path.display().to_string();
    let mut doc: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.clone(),
        message: e.to_string(),
    })?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let job: TrainJob = doc
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| Error::Parse {
            path: origin,
            message: e.to_string(),
        })?;
    job.train.validate()?;
    let effective =
        toml::to_string(&job).map_err(|e| Error::validation("config", e.to_string()))?;
    Ok((job, effective))
}

pub fn run_train(common: &Common, out: &mut dyn Write) -> Result<()> {
    let path = require(&common.config, "config")?;
    let dir = require(&common.out, "out")?;
    let (mut job, effective) = load_job(path, &common.overrides)?;
    let base = path.parent().unwrap_or(Path::new("."));
    job.train.seed = common.seed;
    if common.threads.is_some() {
        job.train.threads = common.threads;
    }
    job.train.checkpoint_dir = Some(dir.join("checkpoints"));

    let mut models = match &job.weights {
        Some(p) => Models::load(&resolve(base, p))?,
        None => Models::new(common.seed),
    };
    let mut manifest = RunManifest::new("train", common, effective);
    let initial_hash = models.weights_hash();

    let dataset = match (&job.dataset, &job.synthetic) {
        (Some(d), None) => IpmDataset::load(&resolve(base, d))?,
        (None, Some(spec)) => {
            let oracle = Models::new(common.seed).with_mu(spec.oracle_mu)?;
            let ds = synth_dataset(
                &oracle,
                &single_agent_templates(spec.count, spec.horizon, common.seed),
                common.seed,
            )?;
            ds.save(&dir.join("dataset"))?;
            manifest.outputs.push("dataset/manifest.toml".into());
            ds
        }
        _ => {
            return Err(Error::validation(
                "dataset",
                "give exactly one of `dataset` and `synthetic`",
            ))
        }
    };

    let w = |e: std::io::Error| Error::io("<stdout>", e);
    let mut printed = Vec::new();
    let result = match &job.multi_dataset {
        None => train(&dataset, models.clone(), &job.train, &mut |s| {
            printed.push(*s)
        })
        .map(|r| (r.models, r.steps)),
        Some(m) => {
            let multi = IpmDataset::load(&resolve(base, m))?;
            train_staged(
                &dataset,
                &multi,
                models.clone(),
                &job.train,
                job.freeze_first,
                &mut |_, s| printed.push(*s),
            )
            .map(|(a, b)| (b.models, a.steps.into_iter().chain(b.steps).collect()))
        }
    };
    let (trained, steps) = match result {
        Ok(r) => r,
        Err(e) => {
            manifest.failure = Some(e.to_string());
            manifest.weights_hash = Some(initial_hash);
            manifest.write(dir)?;
            return Err(e);
        }
    };
    models = trained;
    models.save(&dir.join("weights.ckpt"))?;
    write_atomic(&dir.join("train_log.csv"), &log_csv(&steps))?;
    manifest.weights_hash = Some(models.weights_hash());
    manifest
        .outputs
        .extend(["weights.ckpt".into(), "train_log.csv".into()]);
    manifest.write(dir)?;
    let last = steps.last();
    writeln!(
        out,
        "{} steps, final loss {:.6e}, mu {:.4}",
        steps.len(),
        last.map_or(f64::NAN, |s| s.loss),
        models.mu()
    )
    .map_err(w)?;
    Ok(())
}

pub fn run_gradcheck(common: &Common, depth: Option<Depth>, out: &mut dyn Write) -> Result<()> {
    let report = match depth {
        Some(d) => gradcheck::run(d, common.seed)?,
        None => gradcheck::run_all(common.seed)?,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    writeln!(out, "{json}").map_err(|e| Error::io("<stdout>", e))?;
    if let Some(dir) = &common.out {
        write_atomic(&dir.join("gradcheck.json"), json.as_bytes())?;
    }
    if report.passed {
        Ok(())
    } else {
        let worst = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        Err(Error::NonFinite(format!("gradient check failed: {worst}")))
    }
}

pub fn run_metrics(
    common: &Common,
    pred: &Path,
    gt: &Path,
    topo: Option<&Path>,
    foot_height: f64,
    out: &mut dyn Write,
) -> Result<()> {
    let topo = topology(topo)?;
    let p = read_poses_csv(pred, DEFAULT_DT)?;
    let g = read_poses_csv(gt, DEFAULT_DT)?;
    let m = evaluate_metrics(&p, &g, &topo, foot_height)?;
    let w = |e: std::io::Error| Error::io("<stdout>", e);
    writeln!(out, "MPJPE  {:.6} m", m.mpjpe).map_err(w)?;
    writeln!(out, "hipADE {:.6} m", m.hip_ade).map_err(w)?;
    writeln!(out, "hipFDE {:.6} m", m.hip_fde).map_err(w)?;
    writeln!(out, "MBLE   {:.6} m", m.mble).map_err(w)?;
    writeln!(out, "FSE    {:.6} cm (H = {} m)", m.fse, m.foot_height).map_err(w)?;
    if let Some(dir) = &common.out {
        let json = serde_json::to_string_pretty(&m).expect("metrics serialize");
        write_atomic(&dir.join("metrics.json"), json.as_bytes())?;
    }
    Ok(())
}

pub fn run_convert(
    common: &Common,
    input: &Path,
    ipm: bool,
    topo: Option<&Path>,
    fps: f64,
    out: &mut dyn Write,
) -> Result<()> {
    if !(fps > 0.0) {
        return Err(Error::validation("fps", "must be positive"));
    }
    let dir = require(&common.out, "out")?;
    let topo = topology(topo)?;
    let poses = if ipm {
        let traj = read_trajectory_csv(input, 1.0 / fps)?;
        PoseTrajectory {
            dt: traj.dt,
            agent_ids: traj.agent_ids.clone(),
            frames: traj
                .frames
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|r| pose_from_ipm(&r.state, r.l, 0.0, &topo, 0.2))
                        .collect()
                })
                .collect(),
        }
    } else {
        let opts = match &common.config {
            Some(p) => {
                let mut doc: toml::Value =
                    read_to_string(p)?
                        .parse()
                        .map_err(|e: toml::de::Error| Error::Parse {
                            path: p.display().to_string(),
                            message: e.to_string(),
                        })?;
                for o in &common.overrides {
                    apply_override(&mut doc, o)?;
                }
                doc.try_into().map_err(|e: toml::de::Error| Error::Parse {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?
            }
            None => ConvertOptions::default(),
        };
        let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
        convert_wide_csv(
            &bytes,
            &input.display().to_string(),
            &topo,
            &opts,
            1.0 / fps,
        )?
    };
    let target = dir.join("poses.csv");
    write_poses_csv(&poses, &target)?;
    writeln!(
        out,
        "{} frames x {} agents -> {}",
        poses.len(),
        poses.agents(),
        target.display()
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}
