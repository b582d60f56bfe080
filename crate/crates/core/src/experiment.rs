//! Experiment orchestration: build scenes from a config, train, evaluate
//! and write result files.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use crate::attention::AttentionMode;
use crate::config::ExperimentConfig;
use crate::env::{BaselineKind, SceneContext};
use crate::error::{invalid, AplError, Result};
use crate::eval::{episodes_jsonl, evaluate, metrics_csv, write_atomic, EpisodeResult, EvalScene, MetricsRecord, Policy, RunTag};
use crate::geom::ViewGrid;
use crate::ppo::{curve_csv, train, Agent, CurvePoint};
use crate::scene::{default_bin, generate_scene, make_model, ObjectModel, Scene};
use crate::{parallel, seeds};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const CHECKPOINT_FILE: &str = "agent.ckpt";
pub const CURVE_FILE: &str = "curve.csv";

/// Builds scene `seed`: object count uniform over `range`.
pub fn build_scene(model: Arc<ObjectModel>, seed: u64, range: (usize, usize)) -> Result<Scene> {
    let n = seeds::rng(seed, "scene-size", 0).gen_range(range.0..=range.1);
    let bin = default_bin(&model);
    generate_scene(model, n, bin, seeds::derive(seed, "scene", 0))
}

/// Scenes and shared data for one configuration.
#[derive(Clone, Debug)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub model: Arc<ObjectModel>,
    pub grid: Arc<ViewGrid>,
    pub train: Vec<Arc<SceneContext>>,
    pub eval: Vec<EvalScene>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let s = &config.scenes;
        let model = Arc::new(make_model(s.model, s.model_points, s.model_seed)?);
        let grid = Arc::new(config.grid.build()?);
        let build = |seed: u64| -> Result<Arc<SceneContext>> {
            let scene = build_scene(model.clone(), seed, s.instance_range())?;
            Ok(Arc::new(SceneContext::new(Arc::new(scene), grid.clone(), config.camera)?))
        };
        let train = if config.needs_agent() && config.eval.checkpoint.is_none() {
            parallel::map_slice(&s.train_seeds, |&seed| build(seed)).into_iter().collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let eval = parallel::map_slice(&s.eval_seeds, |&seed| build(seed).map(|context| EvalScene { seed, context }))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Lab {
            config,
            model,
            grid,
            train,
            eval,
        })
    }

    /// Training scenes, built on demand.
    pub fn ensure_train_scenes(&mut self) -> Result<()> {
        if !self.train.is_empty() {
            return Ok(());
        }
        let s = &self.config.scenes;
        let (model, grid, camera) = (self.model.clone(), self.grid.clone(), self.config.camera);
        self.train = parallel::map_slice(&s.train_seeds, |&seed| {
            let scene = build_scene(model.clone(), seed, s.instance_range())?;
            Ok(Arc::new(SceneContext::new(Arc::new(scene), grid.clone(), camera)?))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    pub fn train_agent(&mut self, progress: impl FnMut(&CurvePoint)) -> Result<(Agent, Vec<CurvePoint>)> {
        self.ensure_train_scenes()?;
        let out = train(&self.train, &self.config.env_config(), &self.config.train, self.config.attention, progress)?;
        Ok((out.agent, out.curve))
    }

    /// Resolves a policy name; learned policies need `agent`.
    pub fn policy(&self, name: &str, agent: Option<&Agent>) -> Result<Policy> {
        match name {
            "learned" | "learned-lowest-score" => {
                let agent = agent.ok_or_else(|| invalid(format!("policy `{name}` needs a trained agent")))?;
                let mode = if name == "learned" { agent.mode } else { AttentionMode::LowestScore };
                Ok(Policy::with_attention(agent, mode, name))
            }
            other => Ok(Policy::Baseline(other.parse::<BaselineKind>()?)),
        }
    }

    pub fn evaluate(&self, policy: &Policy) -> Result<(MetricsRecord, Vec<EpisodeResult>)> {
        let e = &self.config.eval;
        evaluate(policy, &self.eval, &self.config.env_config(), e.episodes, e.seed, e.log_episodes)
    }
}

/// Paths written by [`run_experiment`].
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub episodes: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub curve: Option<PathBuf>,
    pub records: Vec<MetricsRecord>,
}

/// A freshly trained agent and where it was written.
#[derive(Clone, Debug)]
pub struct Trained {
    pub agent: Agent,
    pub checkpoint: PathBuf,
    pub curve: PathBuf,
}

/// Trains on the lab's training scenes and writes the checkpoint and
/// training curve into `out_dir`.
pub fn train_and_save(lab: &mut Lab, out_dir: &Path, progress: &mut dyn FnMut(&CurvePoint)) -> Result<Trained> {
    let (agent, curve) = lab.train_agent(|p| progress(p))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let header = serde_json::json!({
        "name": lab.config.name,
        "steps": curve.last().map_or(0, |p| p.step),
        "seed": lab.config.train.seed,
    });
    agent.save(&checkpoint, header)?;
    let curve_path = out_dir.join(CURVE_FILE);
    write_atomic(&curve_path, curve_csv(&curve).as_bytes())?;
    Ok(Trained {
        agent,
        checkpoint,
        curve: curve_path,
    })
}

/// Trains or loads the agent when a learned policy is listed.
fn obtain_agent(lab: &mut Lab, out_dir: &Path, outputs: &mut RunOutputs, progress: &mut dyn FnMut(&CurvePoint)) -> Result<Option<Agent>> {
    if !lab.config.needs_agent() {
        return Ok(None);
    }
    if let Some(path) = &lab.config.eval.checkpoint {
        let agent = Agent::load(path)?;
        if agent.horizon != lab.config.env.horizon {
            return Err(invalid(format!(
                "checkpoint was trained for horizon {} but the config uses {}",
                agent.horizon, lab.config.env.horizon
            )));
        }
        return Ok(Some(agent));
    }
    let trained = train_and_save(lab, out_dir, progress)?;
    outputs.checkpoint = Some(trained.checkpoint);
    outputs.curve = Some(trained.curve);
    Ok(Some(trained.agent))
}

/// Train (if needed) and evaluate every listed policy; writes the metrics
/// CSV, the episode log and any checkpoint under `output_dir`.
pub fn run_experiment(config: ExperimentConfig, mut progress: impl FnMut(&CurvePoint)) -> Result<RunOutputs> {
    let out_dir = config.output_dir.clone();
    let mut lab = Lab::new(config)?;
    let mut outputs = RunOutputs::default();
    let agent = obtain_agent(&mut lab, &out_dir, &mut outputs, &mut progress)?;
    let tag = RunTag::of(&lab.config.env_config());
    let mut rows = Vec::new();
    let mut episodes = Vec::new();
    for name in lab.config.eval.policies.clone() {
        let policy = lab.policy(&name, agent.as_ref())?;
        let (m, eps) = lab.evaluate(&policy)?;
        rows.push((tag, m));
        episodes.extend(eps);
    }
    outputs.metrics = out_dir.join(METRICS_FILE);
    write_atomic(&outputs.metrics, metrics_csv(&rows).as_bytes())?;
    if lab.config.eval.log_episodes {
        let p = out_dir.join(EPISODES_FILE);
        write_atomic(&p, episodes_jsonl(&episodes)?.as_bytes())?;
        outputs.episodes = Some(p);
    }
    outputs.records = rows.into_iter().map(|(_, m)| m).collect();
    Ok(outputs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Horizon,
}

impl std::str::FromStr for SweepParam {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "T" | "t" | "horizon" => Ok(SweepParam::Horizon),
            other => Err(invalid(format!("unknown sweep parameter `{other}`"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Horizon => "T",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Alpha => cfg.env.reward.alpha = value,
            SweepParam::Horizon => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(invalid(format!("horizon must be a non-negative integer, got {value}")));
                }
                cfg.env.horizon = value as usize;
            }
        }
        Ok(())
    }
}

pub const SWEEP_HEADER_PREFIX: &str = "param,value,";

/// Runs the experiment once per value; each run lands in its own
/// subdirectory and one combined CSV is written to `output_dir/sweep-<param>.csv`.
pub fn sweep(config: ExperimentConfig, param: SweepParam, values: &[f64], mut progress: impl FnMut(f64, &CurvePoint)) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(invalid("sweep needs at least one value"));
    }
    let root = config.output_dir.clone();
    let mut csv = String::new();
    for (k, &v) in values.iter().enumerate() {
        let mut cfg = config.clone();
        param.apply(&mut cfg, v)?;
        if param == SweepParam::Horizon && v == 0.0 && cfg.needs_agent() && cfg.eval.checkpoint.is_none() {
            // Nothing to learn without a move; the single view is policy-independent.
            cfg.eval.policies.retain(|p| !p.starts_with("learned"));
            if cfg.eval.policies.is_empty() {
                cfg.eval.policies.push("random".into());
            }
        }
        cfg.output_dir = root.join(format!("{}-{}", param.name(), v));
        cfg.validate()?;
        let out = run_experiment(cfg, |p| progress(v, p))?;
        let text = std::fs::read_to_string(&out.metrics)?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if k == 0 {
            csv.push_str(SWEEP_HEADER_PREFIX);
            csv.push_str(header);
            csv.push('\n');
        }
        for l in lines {
            csv.push_str(&format!("{},{},{}\n", param.name(), v, l));
        }
    }
    let path = root.join(format!("sweep-{}.csv", param.name()));
    write_atomic(&path, csv.as_bytes())?;
    Ok(path)
}
