//! Policy evaluation: episode runner, aggregated metrics and result files.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use crate::attention::AttentionMode;
use crate::env::{baseline_action, lowest_score_index, Action, BaselineKind, Env, EnvConfig, RewardTerms, SceneContext, StartView};
use crate::error::Result;
use crate::metrics::SceneScore;
use crate::ppo::Agent;
use crate::{parallel, seeds};

/// A policy under evaluation.
#[derive(Clone, Debug)]
pub enum Policy {
    Baseline(BaselineKind),
    Learned { name: String, agent: Arc<Agent> },
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::Baseline(k) => k.name().to_string(),
            Policy::Learned { name, .. } => name.clone(),
        }
    }

    /// The same agent with a different attention rule.
    pub fn with_attention(agent: &Agent, mode: AttentionMode, name: &str) -> Policy {
        let mut a = agent.clone();
        a.mode = mode;
        Policy::Learned {
            name: name.to_string(),
            agent: Arc::new(a),
        }
    }
}

/// One JSON-lines record: the state after step `step` (0 is the start view).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub policy: String,
    pub scene: usize,
    pub scene_seed: u64,
    pub episode_seed: u64,
    pub step: usize,
    pub view_index: usize,
    pub action: Option<Action>,
    pub reward: Option<RewardTerms>,
    pub attended: Option<usize>,
    pub attended_gt: Option<usize>,
    pub attention_weights: Vec<f64>,
    pub estimate: serde_json::Value,
    pub per_object_e_add: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub policy: String,
    pub scene: usize,
    pub scene_seed: u64,
    pub episode_seed: u64,
    pub score: SceneScore,
    pub distance: f64,
    pub total_reward: f64,
    pub views: Vec<usize>,
    #[serde(skip)]
    pub logs: Vec<StepLog>,
}

/// Runs one evaluation episode from the first grid view. Learned policies
/// act with their mean action; baselines attend to the lowest-score object.
pub fn run_episode(
    policy: &Policy,
    ctx: Arc<SceneContext>,
    scene: usize,
    scene_seed: u64,
    env_cfg: &EnvConfig,
    episode_seed: u64,
    log: bool,
) -> Result<EpisodeResult> {
    let cfg = EnvConfig {
        start: StartView::First,
        ..env_cfg.clone()
    };
    let (mut env, mut obs) = Env::reset(ctx, cfg, seeds::derive(episode_seed, "estimator", 0))?;
    let mut rng = seeds::rng(episode_seed, "policy", 0);
    let name = policy.name();
    let mut logs = Vec::new();
    let mut total_reward = 0.0;

    let record = |env: &Env, action, reward, attended: Option<usize>, weights: Vec<f64>, attended_gt| StepLog {
        policy: name.clone(),
        scene,
        scene_seed,
        episode_seed,
        step: env.step_index(),
        view_index: env.current_view(),
        action,
        reward,
        attended,
        attended_gt,
        attention_weights: weights,
        estimate: env.estimate().summary(),
        per_object_e_add: env.score().per_object,
        distance: env.distance(),
    };

    while !env.is_done() {
        let (action, attended, weights) = match policy {
            Policy::Baseline(kind) => {
                let m = lowest_score_index(&obs.features);
                let mut w = vec![0.0; obs.features.len()];
                if let Some(m) = m {
                    w[m] = 1.0;
                }
                (baseline_action(*kind, &env, &mut rng)?, m, w)
            }
            Policy::Learned { agent, .. } => {
                let d = agent.decide::<rand_chacha::ChaCha8Rng>(&obs, None)?;
                (d.action, d.attended, d.weights)
            }
        };
        // The attention decided at a state is logged with that state.
        if log && env.step_index() == 0 {
            logs.push(record(&env, None, None, attended, weights, None));
        } else if let Some(last) = logs.last_mut() {
            last.attended = attended;
            last.attention_weights = weights;
        }
        let r = env.step(action, attended)?;
        total_reward += r.reward.total;
        if log {
            logs.push(record(&env, Some(action), Some(r.reward), None, Vec::new(), r.attended_gt));
        }
        obs = r.observation;
    }
    if log && logs.is_empty() {
        logs.push(record(&env, None, None, None, Vec::new(), None));
    }
    Ok(EpisodeResult {
        policy: name,
        scene,
        scene_seed,
        episode_seed,
        score: env.score(),
        distance: env.distance(),
        total_reward,
        views: env.visited().to_vec(),
        logs,
    })
}

/// Aggregate over episodes. Errors and detection rates are object-weighted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub policy: String,
    pub episodes: usize,
    pub objects: usize,
    pub mean_distance: f64,
    pub mean_e_add: f64,
    pub detection_rate: f64,
    pub mean_return: f64,
    pub per_scene: Vec<SceneMetrics>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneMetrics {
    pub scene: usize,
    pub scene_seed: u64,
    pub mean_e_add: f64,
    pub detection_rate: f64,
    pub distance: f64,
}

impl MetricsRecord {
    pub fn from_episodes(policy: &str, eps: &[EpisodeResult]) -> Self {
        let objects: usize = eps.iter().map(|e| e.score.detectable.len()).sum();
        let err_sum: f64 = eps
            .iter()
            .flat_map(|e| e.score.detectable.iter().map(|&i| e.score.per_object[i]))
            .sum();
        let detected: usize = eps.iter().map(|e| e.score.detected).sum();
        let n = eps.len().max(1) as f64;
        let div = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
        MetricsRecord {
            policy: policy.to_string(),
            episodes: eps.len(),
            objects,
            mean_distance: eps.iter().map(|e| e.distance).sum::<f64>() / n,
            mean_e_add: div(err_sum, objects),
            detection_rate: div(detected as f64, objects),
            mean_return: eps.iter().map(|e| e.total_reward).sum::<f64>() / n,
            per_scene: eps
                .iter()
                .map(|e| SceneMetrics {
                    scene: e.scene,
                    scene_seed: e.scene_seed,
                    mean_e_add: e.score.mean_e_add(),
                    detection_rate: e.score.detection_rate(),
                    distance: e.distance,
                })
                .collect(),
            seeds: eps.iter().map(|e| e.episode_seed).collect(),
        }
    }
}

/// An evaluation scene with the seed it was generated from.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub seed: u64,
    pub context: Arc<SceneContext>,
}

/// Evaluates `policy` on every scene `episodes` times. Episode seeds depend
/// only on `(seed, scene, repetition)`, so policies see paired conditions.
pub fn evaluate(
    policy: &Policy,
    scenes: &[EvalScene],
    env_cfg: &EnvConfig,
    episodes: usize,
    seed: u64,
    log: bool,
) -> Result<(MetricsRecord, Vec<EpisodeResult>)> {
    let jobs: Vec<(usize, usize)> = (0..scenes.len()).flat_map(|s| (0..episodes).map(move |r| (s, r))).collect();
    let results = parallel::map_slice(&jobs, |&(s, r)| {
        let ep_seed = seeds::derive(seed, "eval", (s * 1_000_003 + r) as u64);
        run_episode(policy, scenes[s].context.clone(), s, scenes[s].seed, env_cfg, ep_seed, log)
    });
    let eps = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((MetricsRecord::from_episodes(&policy.name(), &eps), eps))
}

pub const METRICS_HEADER: &str =
    "policy,alpha,beta,horizon,episodes,objects,weighting,mean_distance_mm,mean_e_add_mm,detection_rate,mean_return";

/// Settings echoed into each metrics row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunTag {
    pub alpha: f64,
    pub beta: f64,
    pub horizon: usize,
}

impl RunTag {
    pub fn of(cfg: &EnvConfig) -> Self {
        RunTag {
            alpha: cfg.reward.alpha,
            beta: cfg.reward.beta,
            horizon: cfg.horizon,
        }
    }
}

pub fn metrics_row(tag: &RunTag, m: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},object,{:.6},{:.6},{:.6},{:.6}",
        m.policy,
        tag.alpha,
        tag.beta,
        tag.horizon,
        m.episodes,
        m.objects,
        m.mean_distance,
        m.mean_e_add,
        m.detection_rate,
        m.mean_return
    )
}

pub fn metrics_csv(rows: &[(RunTag, MetricsRecord)]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for (tag, m) in rows {
        let _ = writeln!(s, "{}", metrics_row(tag, m));
    }
    s
}

pub fn episodes_jsonl<'a>(eps: impl IntoIterator<Item = &'a EpisodeResult>) -> Result<String> {
    let mut s = String::new();
    for e in eps {
        for l in &e.logs {
            s.push_str(&serde_json::to_string(l)?);
            s.push('\n');
        }
    }
    Ok(s)
}

/// Writes through a sibling temp file and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
