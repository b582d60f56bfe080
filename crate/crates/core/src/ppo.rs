//! Clipped policy-gradient training of attention, policy and value jointly.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, attend_backward, AttentionMode, AttentionParams, OUTPUT_DIM};
use crate::env::{state_dim, Action, Env, EnvConfig, Observation, SceneContext, StartView};
use crate::error::{invalid, AplError, Result};
use crate::fusion::ObjectFeature;
use crate::nn::{AdamState, Checkpoint, DenseNet, GaussianHead};
use crate::{parallel, seeds};

/// Width of the normalized action.
pub const ACTION_DIM: usize = 2;
const CHECKPOINT_KIND: &str = "apl-agent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub minibatch: usize,
    pub epochs: usize,
    /// Environment steps collected per update.
    pub batch_steps: usize,
    pub total_steps: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub hidden: usize,
    pub log_std_init: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.995,
            lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            minibatch: 128,
            epochs: 4,
            batch_steps: 1024,
            total_steps: 200_000,
            value_coef: 0.5,
            entropy_coef: 0.01,
            hidden: 128,
            log_std_init: -1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("gamma and lambda must lie in [0, 1]"));
        }
        if !(self.clip > 0.0) || !(self.lr > 0.0) {
            return Err(invalid("clip and lr must be positive"));
        }
        if self.minibatch == 0 || self.epochs == 0 || self.batch_steps == 0 || self.hidden == 0 {
            return Err(invalid("minibatch, epochs, batch_steps and hidden must be positive"));
        }
        Ok(())
    }
}

/// Attention, Gaussian policy and value function.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub attention: AttentionParams,
    pub policy: DenseNet,
    pub value: DenseNet,
    pub head: GaussianHead,
    pub mode: AttentionMode,
    pub horizon: usize,
}

/// One policy evaluation.
#[derive(Clone, Debug)]
pub struct Decision {
    pub u: Vec<f64>,
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
    pub attended: Option<usize>,
    pub weights: Vec<f64>,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(horizon: usize, hidden: usize, mode: AttentionMode, log_std: f64, rng: &mut R) -> Result<Self> {
        let n = state_dim(horizon);
        Ok(Agent {
            attention: AttentionParams::new(rng)?,
            policy: DenseNet::mlp(n, hidden, ACTION_DIM, rng)?,
            value: DenseNet::mlp(n, hidden, 1, rng)?,
            head: GaussianHead {
                log_std: vec![log_std; ACTION_DIM],
            },
            mode,
            horizon,
        })
    }

    pub fn hidden(&self) -> usize {
        self.policy.layers()[0].output
    }

    pub fn param_count(&self) -> usize {
        self.attention.param_count() + self.policy.param_count() + self.value.param_count() + ACTION_DIM
    }

    /// Attention, policy, value, then log std.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.attention.flat();
        v.extend_from_slice(self.policy.params());
        v.extend_from_slice(self.value.params());
        v.extend_from_slice(&self.head.log_std);
        v
    }

    pub fn set_flat(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(invalid(format!("expected {} agent parameters, got {}", self.param_count(), p.len())));
        }
        let a = self.attention.param_count();
        let b = a + self.policy.param_count();
        let c = b + self.value.param_count();
        self.attention.set_flat(&p[..a])?;
        self.policy.set_params(&p[a..b])?;
        self.value.set_params(&p[b..c])?;
        self.head.log_std.copy_from_slice(&p[c..]);
        Ok(())
    }

    /// Attention output for a feature set; zeros when nothing is detected.
    pub fn attend(&self, features: &[ObjectFeature]) -> Result<(Vec<f64>, Option<usize>, Vec<f64>)> {
        if features.is_empty() {
            return Ok((vec![0.0; OUTPUT_DIM], None, Vec::new()));
        }
        let (out, _) = attend(features, &self.attention, self.mode)?;
        Ok((out.o, Some(out.m), out.weights))
    }

    /// Samples an action, or takes the mean when `rng` is `None`.
    pub fn decide<R: Rng + ?Sized>(&self, obs: &Observation, rng: Option<&mut R>) -> Result<Decision> {
        let (o, attended, weights) = self.attend(&obs.features)?;
        let s = obs.state_vector(&o);
        let mu = self.policy.predict(&s)?;
        let value = self.value.predict(&s)?[0];
        let u = match rng {
            Some(r) => self.head.sample(&mu, r),
            None => mu.clone(),
        };
        Ok(Decision {
            log_prob: self.head.log_prob(&mu, &u),
            action: Action::from_normalized(&u),
            u,
            value,
            attended,
            weights,
        })
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint {
            header: serde_json::json!({
                "kind": CHECKPOINT_KIND,
                "horizon": self.horizon,
                "hidden": self.hidden(),
                "attention": self.mode,
                "params": self.param_count(),
                "extra": extra,
            }),
            params: self.flat(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let h = &ck.header;
        if h["kind"] != CHECKPOINT_KIND {
            return Err(AplError::Format("checkpoint is not an agent".into()));
        }
        let field = |k: &str| {
            h[k].as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| AplError::Format(format!("checkpoint header lacks `{k}`")))
        };
        let mode: AttentionMode = serde_json::from_value(h["attention"].clone())?;
        let mut rng = seeds::rng(0, "checkpoint", 0);
        let mut agent = Agent::new(field("horizon")?, field("hidden")?, mode, 0.0, &mut rng)?;
        agent.set_flat(&ck.params).map_err(|e| AplError::Format(e.to_string()))?;
        Ok(agent)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let mut buf = Vec::new();
        self.to_checkpoint(extra).write(&mut buf)?;
        crate::eval::write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(AplError::MissingArtifact(path.to_path_buf()));
        }
        let f = std::fs::File::open(path)?;
        Agent::from_checkpoint(&Checkpoint::read(std::io::BufReader::new(f))?)
    }
}

/// Everything the update needs to recompute one decision.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<ObjectFeature>,
    pub position: [f64; 3],
    pub history: Vec<f64>,
    pub u: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
}

impl Sample {
    fn observation(&self) -> Observation {
        Observation {
            features: self.features.clone(),
            position: self.position,
            history: self.history.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Sample>,
    pub bootstrap: f64,
    pub scene: usize,
    pub final_e_add: f64,
    pub final_detection: f64,
    pub distance: f64,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Generalized advantage estimates and value targets.
pub fn gae_advantages(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in xs.iter_mut() {
        *x -= mean;
        if sd > 1e-12 {
            *x /= sd;
        }
    }
}

/// Runs one episode with a sampled policy.
pub fn run_training_episode(ctx: Arc<SceneContext>, scene: usize, cfg: &EnvConfig, agent: &Agent, seed: u64) -> Result<Trajectory> {
    let (mut env, mut obs) = Env::reset(ctx, cfg.clone(), seeds::derive(seed, "estimator", 0))?;
    let mut rng = seeds::rng(seed, "policy", 0);
    let mut traj = Trajectory {
        scene,
        ..Default::default()
    };
    while !env.is_done() {
        let d = agent.decide(&obs, Some(&mut rng))?;
        let r = env.step(d.action, d.attended)?;
        traj.steps.push(Sample {
            features: obs.features,
            position: obs.position,
            history: obs.history,
            u: d.u,
            log_prob: d.log_prob,
            value: d.value,
            reward: r.reward.total,
        });
        obs = r.observation;
    }
    let score = env.score();
    traj.final_e_add = score.mean_e_add();
    traj.final_detection = score.detection_rate();
    traj.distance = env.distance();
    Ok(traj)
}

/// Collects whole episodes totalling at least `n_steps` steps; episodes
/// run in parallel and each gets its own seed.
pub fn collect_rollouts(
    contexts: &[Arc<SceneContext>],
    cfg: &EnvConfig,
    agent: &Agent,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if contexts.is_empty() {
        return Err(invalid("no training scenes"));
    }
    if !agent.policy.is_finite() || !agent.value.is_finite() {
        return Err(AplError::TrainingDiverged("policy parameters are not finite".into()));
    }
    let episodes = n_steps.div_ceil(cfg.horizon.max(1));
    let out = parallel::map_range(episodes, |k| {
        let ep_seed = seeds::derive(seed, "episode", k as u64);
        let scene = (seeds::derive(ep_seed, "scene", 0) % contexts.len() as u64) as usize;
        run_training_episode(contexts[scene].clone(), scene, cfg, agent, ep_seed)
    });
    out.into_iter().collect()
}

/// A sample with its advantage and value target.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub sample: Sample,
    pub advantage: f64,
    pub target: f64,
}

/// Advantages per trajectory, normalized over the whole batch.
pub fn prepare_batch(trajs: &[Trajectory], gamma: f64, lambda: f64) -> Vec<Prepared> {
    let mut out = Vec::new();
    for t in trajs {
        let r: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
        let v: Vec<f64> = t.steps.iter().map(|s| s.value).collect();
        let (adv, ret) = gae_advantages(&r, &v, t.bootstrap, gamma, lambda);
        for ((s, a), g) in t.steps.iter().zip(adv).zip(ret) {
            out.push(Prepared {
                sample: s.clone(),
                advantage: a,
                target: g,
            });
        }
    }
    let mut adv: Vec<f64> = out.iter().map(|p| p.advantage).collect();
    normalize(&mut adv);
    for (p, a) in out.iter_mut().zip(adv) {
        p.advantage = a;
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossStats {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate for one sample: `min(rA, clip(r)A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, clip: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv)
}

/// Minibatch loss (to be minimized) and its gradient in [`Agent::flat`] layout.
pub fn loss_and_grad(agent: &Agent, batch: &[&Prepared], cfg: &TrainConfig) -> Result<(LossStats, Vec<f64>)> {
    if batch.is_empty() {
        return Err(invalid("empty minibatch"));
    }
    let n_att = agent.attention.param_count();
    let n_pol = agent.policy.param_count();
    let n_val = agent.value.param_count();
    let (o_pol, o_val, o_std) = (n_att, n_att + n_pol, n_att + n_pol + n_val);
    let mut grad = vec![0.0; agent.param_count()];
    let inv = 1.0 / batch.len() as f64;
    let mut stats = LossStats::default();

    for p in batch {
        let s = &p.sample;
        let att = if s.features.is_empty() {
            None
        } else {
            Some(attend(&s.features, &agent.attention, agent.mode)?)
        };
        let o = att.as_ref().map_or(vec![0.0; OUTPUT_DIM], |(out, _)| out.o.clone());
        let state = s.observation().state_vector(&o);
        let (mu, pc) = agent.policy.forward(&state)?;
        let (v, vc) = agent.value.forward(&state)?;

        let logp = agent.head.log_prob(&mu, &s.u);
        let ratio = (logp - s.log_prob).exp();
        let a = p.advantage;
        let surr = clipped_surrogate(ratio, a, cfg.clip);
        let err = v[0] - p.target;
        stats.policy -= surr * inv;
        stats.value += err * err * inv;
        stats.approx_kl += (s.log_prob - logp) * inv;
        let clipped = (a > 0.0 && ratio > 1.0 + cfg.clip) || (a < 0.0 && ratio < 1.0 - cfg.clip);
        if clipped {
            stats.clip_fraction += inv;
        }

        // d(-surr)/d logp is -rA where the unclipped branch is active.
        let c = if clipped { 0.0 } else { -a * ratio * inv };
        let (gm, gs) = agent.head.log_prob_grads(&mu, &s.u);
        let g_mu: Vec<f64> = gm.iter().map(|g| g * c).collect();
        for (k, g) in gs.iter().enumerate() {
            grad[o_std + k] += g * c;
        }
        let ds_p = agent.policy.backward_into(&pc, &g_mu, &mut grad[o_pol..o_val])?;
        let ds_v = agent
            .value
            .backward_into(&vc, &[2.0 * cfg.value_coef * err * inv], &mut grad[o_val..o_std])?;
        if let Some((_, cache)) = &att {
            let g_o: Vec<f64> = (0..OUTPUT_DIM).map(|j| ds_p[j] + ds_v[j]).collect();
            let ag = attend_backward(&agent.attention, cache, &g_o)?;
            for (g, d) in grad[..n_att].iter_mut().zip(&ag.params) {
                *g += d;
            }
        }
    }
    stats.entropy = agent.head.entropy();
    for k in 0..ACTION_DIM {
        grad[o_std + k] -= cfg.entropy_coef;
    }
    let total = stats.policy + cfg.value_coef * stats.value - cfg.entropy_coef * stats.entropy;
    if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(AplError::TrainingDiverged("loss is not finite".into()));
    }
    Ok((stats, grad))
}

/// Total minimized loss, for gradient checks.
pub fn total_loss(agent: &Agent, batch: &[&Prepared], cfg: &TrainConfig) -> Result<f64> {
    let (s, _) = loss_and_grad(agent, batch, cfg)?;
    Ok(s.policy + cfg.value_coef * s.value - cfg.entropy_coef * s.entropy)
}

/// Epochs of shuffled minibatch Adam steps over `batch`.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut Agent,
    adam: &mut AdamState,
    batch: &[Prepared],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossStats> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mut last = LossStats::default();
    let mut params = agent.flat();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), rng);
        for chunk in idx.chunks(cfg.minibatch) {
            let mb: Vec<&Prepared> = chunk.iter().map(|&i| &batch[i]).collect();
            let (stats, grad) = loss_and_grad(agent, &mb, cfg)?;
            adam.update(&mut params, &grad)?;
            agent.set_flat(&params)?;
            last = stats;
        }
    }
    Ok(last)
}

/// One row of the training curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_return: f64,
    pub mean_e_add: f64,
    pub detection_rate: f64,
    pub distance: f64,
}

pub const CURVE_HEADER: &str = "step,mean_return,mean_e_add,detection_rate,distance";

impl CurvePoint {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.mean_return, self.mean_e_add, self.detection_rate, self.distance
        )
    }
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for p in points {
        s.push_str(&p.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
}

/// Alternates rollouts and updates until `total_steps` environment steps.
/// Training episodes start from a random view.
pub fn train(
    contexts: &[Arc<SceneContext>],
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    mode: AttentionMode,
    mut progress: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    env_cfg.validate()?;
    if env_cfg.horizon == 0 {
        return Err(invalid("training needs a horizon of at least one step"));
    }
    let contexts: Vec<Arc<SceneContext>> = contexts.iter().filter(|c| !c.detectable.is_empty()).cloned().collect();
    if contexts.is_empty() {
        return Err(AplError::DegenerateScene("no training scene has a detectable object".into()));
    }
    let mut init_rng = seeds::rng(cfg.seed, "init", 0);
    let mut agent = Agent::new(env_cfg.horizon, cfg.hidden, mode, cfg.log_std_init, &mut init_rng)?;
    let mut adam = AdamState::new(agent.param_count(), cfg.lr);
    let mut shuffle = seeds::rng(cfg.seed, "trainer", 0);
    let ecfg = EnvConfig {
        start: StartView::Random,
        ..env_cfg.clone()
    };
    let mut steps = 0;
    let mut curve = Vec::new();
    let mut iteration = 0u64;
    while steps < cfg.total_steps {
        let want = cfg.batch_steps.min(cfg.total_steps - steps);
        let trajs = collect_rollouts(&contexts, &ecfg, &agent, want, seeds::derive(cfg.seed, "rollout", iteration))?;
        let n: usize = trajs.iter().map(|t| t.steps.len()).sum();
        steps += n;
        let k = trajs.len() as f64;
        let point = CurvePoint {
            step: steps,
            mean_return: trajs.iter().map(Trajectory::total_reward).sum::<f64>() / k,
            mean_e_add: trajs.iter().map(|t| t.final_e_add).sum::<f64>() / k,
            detection_rate: trajs.iter().map(|t| t.final_detection).sum::<f64>() / k,
            distance: trajs.iter().map(|t| t.distance).sum::<f64>() / k,
        };
        progress(&point);
        curve.push(point);
        let batch = prepare_batch(&trajs, cfg.gamma, cfg.lambda);
        ppo_update(&mut agent, &mut adam, &batch, cfg, &mut shuffle)?;
        iteration += 1;
    }
    Ok(TrainOutcome { agent, curve, steps })
}

/// Two-armed bandit through the full update: the sign of the first
/// action coordinate picks the arm, the positive arm pays 1. Returns the
/// final probability of choosing the paying arm.
pub fn bandit_probability(seed: u64, steps: usize) -> Result<f64> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut a = Agent::new(0, 8, AttentionMode::Learned, 0.0, &mut rng)?;
    let cfg = TrainConfig { lr: 0.02, minibatch: 32, epochs: 4, batch_steps: 128, ..Default::default() };
    let mut adam = AdamState::new(a.param_count(), cfg.lr);
    let obs = Observation { features: Vec::new(), position: [0.0; 3], history: Vec::new() };
    let mut done = 0;
    while done < steps {
        let trajs: Vec<Trajectory> = (0..cfg.batch_steps)
            .map(|_| {
                let d = a.decide(&obs, Some(&mut rng))?;
                let reward = if d.u[0] > 0.0 { 1.0 } else { 0.0 };
                Ok(Trajectory {
                    steps: vec![Sample {
                        features: Vec::new(),
                        position: [0.0; 3],
                        history: Vec::new(),
                        u: d.u,
                        log_prob: d.log_prob,
                        value: d.value,
                        reward,
                    }],
                    ..Default::default()
                })
            })
            .collect::<Result<_>>()?;
        done += trajs.len();
        let batch = prepare_batch(&trajs, cfg.gamma, cfg.lambda);
        ppo_update(&mut a, &mut adam, &batch, &cfg, &mut rng)?;
    }
    let mu = a.policy.predict(&obs.state_vector(&[0.0; OUTPUT_DIM]))?[0];
    let sd = a.head.log_std[0].exp();
    Ok(0.5 * (1.0 + libm::erf(mu / (sd * std::f64::consts::SQRT_2))))
}
