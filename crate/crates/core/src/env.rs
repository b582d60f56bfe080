//! Episodic camera-placement environment and the baseline policies.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AplError, Result};
use crate::estimator::{estimate, NoiseModel};
use crate::fusion::{cluster_hypotheses, select_best, HypothesisPool, ObjectFeature, SceneEstimate, CLUSTER_THRESHOLD_FACTOR, DEFAULT_EPSILON};
use crate::geom::{wrap_angle, Vec3, ViewGrid};
use crate::metrics::{e_add, score_scene, SceneScore, UNDETECTED_PENALTY};
use crate::parallel;
use crate::scene::{render, Intrinsics, Scene, DETECTABILITY_THRESHOLD};

/// Millimetres per reward unit.
pub const REWARD_UNIT_MM: f64 = 100.0;
/// Standard deviation of the random baseline, (azimuth, elevation) rad.
pub const RANDOM_BASELINE_SIGMA: (f64, f64) = (0.6, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta: f64,
    /// mm
    pub undetected_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha: 0.1,
            beta: 0.9,
            undetected_penalty: UNDETECTED_PENALTY,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("alpha and beta must lie in [0, 1], got {} and {}", self.alpha, self.beta)));
        }
        if !(self.undetected_penalty >= 0.0) {
            return Err(invalid("undetected penalty must be non-negative"));
        }
        Ok(())
    }

    /// Weight on the motion term.
    pub fn motion_weight(&self) -> f64 {
        (1.0 - self.alpha) * (1.0 - self.beta)
    }
}

/// Reward components in reward units (decimetres).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub e_add: f64,
    pub dist: f64,
    pub motion: f64,
    pub total: f64,
}

impl RewardTerms {
    pub fn combine(e_add: f64, dist: f64, motion: f64, cfg: &RewardConfig) -> Self {
        let a = cfg.alpha;
        let total = (1.0 - a) * e_add + a * cfg.beta * dist - cfg.motion_weight() * motion;
        RewardTerms { e_add, dist, motion, total }
    }
}

/// Reward for moving from `v_t` to `v_next` (all inputs in mm).
///
/// `e_prev`/`e_next` are the attended object's errors before and after the
/// move, already capped at the penalty; `target` is its estimated position.
pub fn reward_terms(
    e_prev: f64,
    e_next: f64,
    target: Option<Vec3>,
    v_t: &Vec3,
    v_next: &Vec3,
    cfg: &RewardConfig,
) -> RewardTerms {
    let e = (e_prev - e_next) / REWARD_UNIT_MM;
    let dist = target.map_or(0.0, |x| ((x - v_t).norm() - (x - v_next).norm()) / REWARD_UNIT_MM);
    let motion = (v_next - v_t).abs().sum() / REWARD_UNIT_MM;
    RewardTerms::combine(e, dist, motion, cfg)
}

/// Camera command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Action {
    pub fn of_view(grid: &ViewGrid, view: usize) -> Self {
        let v = grid.view(view);
        Action {
            azimuth: v.azimuth,
            elevation: v.elevation,
        }
    }

    /// Maps a normalized policy output: azimuth `pi * u0`, elevation
    /// `pi/4 * (1 + u1)`.
    pub fn from_normalized(u: &[f64]) -> Self {
        Action {
            azimuth: std::f64::consts::PI * u[0],
            elevation: std::f64::consts::FRAC_PI_4 * (1.0 + u[1]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.azimuth.is_finite() && self.elevation.is_finite()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartView {
    /// Lowest ring, azimuth 0.
    #[default]
    First,
    Random,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub reward: RewardConfig,
    pub noise: NoiseModel,
    /// Verification inlier distance, mm.
    pub epsilon: f64,
    pub start: StartView,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 5,
            reward: RewardConfig::default(),
            noise: NoiseModel::default(),
            epsilon: DEFAULT_EPSILON,
            start: StartView::First,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.noise.validate()?;
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon must be positive"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        state_dim(self.horizon)
    }
}

/// Policy state width for horizon `t`.
pub fn state_dim(t: usize) -> usize {
    15 + 3 * t
}

/// Shannon entropy (nats) of the normalized counts.
pub fn count_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Immutable per-scene data shared by every episode on that scene.
#[derive(Clone, Debug)]
pub struct SceneContext {
    pub scene: Arc<Scene>,
    pub grid: Arc<ViewGrid>,
    pub intrinsics: Intrinsics,
    pub detectable: Vec<usize>,
    /// Mask-area entropy per view.
    pub entropy: Vec<f64>,
    /// Visibility per view and object.
    pub visibility: Vec<Vec<f64>>,
}

impl SceneContext {
    /// Renders every view once to find detectable objects and view entropies.
    pub fn new(scene: Arc<Scene>, grid: Arc<ViewGrid>, intrinsics: Intrinsics) -> Result<Self> {
        let rows = parallel::map_range(grid.len(), |v| {
            render(&scene, &grid, v, &intrinsics).map(|r| {
                let counts: Vec<usize> = r.masks.iter().map(Vec::len).collect();
                (r.visibility, count_entropy(&counts))
            })
        });
        let mut visibility = Vec::with_capacity(grid.len());
        let mut entropy = Vec::with_capacity(grid.len());
        for row in rows {
            let (vis, h) = row?;
            visibility.push(vis);
            entropy.push(h);
        }
        let detectable = (0..scene.len())
            .filter(|&i| visibility.iter().map(|row| row[i]).fold(0.0, f64::max) >= DETECTABILITY_THRESHOLD)
            .collect();
        Ok(SceneContext {
            scene,
            grid,
            intrinsics,
            detectable,
            entropy,
            visibility,
        })
    }
}

/// Per-view mask-area entropy.
pub fn view_entropy_table(scene: &Scene, grid: &ViewGrid, intr: &Intrinsics) -> Result<Vec<f64>> {
    let rows = parallel::map_range(grid.len(), |v| {
        render(scene, grid, v, intr).map(|r| count_entropy(&r.masks.iter().map(Vec::len).collect::<Vec<_>>()))
    });
    rows.into_iter().collect()
}

/// What the agent sees after reset or a step.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub features: Vec<ObjectFeature>,
    /// Camera position relative to the grid centre, divided by the radius.
    pub position: [f64; 3],
    /// Previous camera positions, 3 per slot, zero beyond the current step.
    pub history: Vec<f64>,
}

impl Observation {
    /// `concat(o, position, history)`.
    pub fn state_vector(&self, o: &[f64]) -> Vec<f64> {
        let mut s = Vec::with_capacity(o.len() + 3 + self.history.len());
        s.extend_from_slice(o);
        s.extend_from_slice(&self.position);
        s.extend_from_slice(&self.history);
        s
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: RewardTerms,
    pub done: bool,
    pub view_index: usize,
    /// Ground-truth object behind the attended hypothesis.
    pub attended_gt: Option<usize>,
    /// Geodesic length of this move, mm.
    pub travel: f64,
}

#[derive(Clone, Debug)]
pub struct Env {
    ctx: Arc<SceneContext>,
    cfg: EnvConfig,
    rng: ChaCha8Rng,
    t: usize,
    views: Vec<usize>,
    pool: HypothesisPool,
    estimate: SceneEstimate,
    distance: f64,
    /// Memoized [`Env::object_error`] for the current estimate.
    errors: Vec<Option<f64>>,
}

impl Env {
    /// Starts an episode: observe the start view and fuse its hypotheses.
    pub fn reset(ctx: Arc<SceneContext>, cfg: EnvConfig, seed: u64) -> Result<(Env, Observation)> {
        cfg.validate()?;
        if ctx.detectable.is_empty() {
            return Err(AplError::DegenerateScene("no detectable objects".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ctx.grid.len();
        let start = match cfg.start {
            StartView::First => 0,
            StartView::Fixed(v) if v < n => v,
            StartView::Fixed(v) => return Err(invalid(format!("start view {v} out of range"))),
            StartView::Random => {
                let mut srng = rng.clone();
                srng.set_stream(1);
                srng.gen_range(0..n)
            }
        };
        let mut env = Env {
            ctx,
            cfg,
            rng,
            t: 0,
            views: vec![start],
            pool: HypothesisPool::new(),
            estimate: SceneEstimate::default(),
            distance: 0.0,
            errors: Vec::new(),
        };
        env.observe(start)?;
        let obs = env.observation();
        Ok((env, obs))
    }

    fn observe(&mut self, view: usize) -> Result<()> {
        let ctx = &self.ctx;
        let rendering = render(&ctx.scene, &ctx.grid, view, &ctx.intrinsics)?;
        let hyps = estimate(&rendering, &ctx.scene, &ctx.grid, view, &self.cfg.noise, &mut self.rng)?;
        self.pool
            .accumulate(hyps, &ctx.grid, view, &rendering, &ctx.scene.model, self.cfg.epsilon)?;
        let clusters = cluster_hypotheses(&self.pool, CLUSTER_THRESHOLD_FACTOR * ctx.scene.model.diameter)?;
        self.estimate = select_best(&self.pool, &clusters, ctx.grid.diameter());
        self.errors = vec![None; ctx.scene.len()];
        Ok(())
    }

    fn observation(&self) -> Observation {
        let grid = &self.ctx.grid;
        let rel = |v: usize| (grid.view(v).position - grid.center) / grid.radius;
        let p = rel(self.current_view());
        let mut history = vec![0.0; 3 * self.cfg.horizon];
        for (slot, &v) in self.views.iter().enumerate().take(self.cfg.horizon) {
            let q = rel(v);
            history[3 * slot..3 * slot + 3].copy_from_slice(&[q.x, q.y, q.z]);
        }
        Observation {
            features: self.estimate.features.clone(),
            position: [p.x, p.y, p.z],
            history,
        }
    }

    pub fn context(&self) -> &Arc<SceneContext> {
        &self.ctx
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn step_index(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.cfg.horizon
    }

    pub fn current_view(&self) -> usize {
        self.views[self.views.len() - 1]
    }

    pub fn visited(&self) -> &[usize] {
        &self.views
    }

    pub fn estimate(&self) -> &SceneEstimate {
        &self.estimate
    }

    pub fn pool(&self) -> &HypothesisPool {
        &self.pool
    }

    /// Total geodesic travel so far, mm.
    pub fn distance(&self) -> f64 {
        self.distance
    }

    /// Full per-object scoring of the current estimate.
    pub fn score(&self) -> SceneScore {
        let poses: Vec<_> = self.estimate.selected.iter().map(|e| e.world_pose).collect();
        score_scene(&poses, &self.ctx.scene, &self.ctx.detectable)
    }

    /// Error of ground-truth object `g` under the current estimate: the best
    /// hypothesis that came from it, capped at the penalty.
    pub fn object_error(&self, g: usize) -> f64 {
        let cap = self.cfg.reward.undetected_penalty;
        let gt = &self.ctx.scene.gt_poses[g];
        self.estimate
            .selected
            .iter()
            .filter(|e| e.hypothesis.gt_index == g)
            .map(|e| e_add(&e.world_pose, gt, &self.ctx.scene.model))
            .fold(cap, f64::min)
    }

    fn cached_error(&mut self, g: usize) -> f64 {
        if let Some(e) = self.errors[g] {
            return e;
        }
        let e = self.object_error(g);
        self.errors[g] = Some(e);
        e
    }

    /// Moves the camera. `attended` indexes the current estimate's objects
    /// and names the object the reward is computed for.
    pub fn step(&mut self, action: Action, attended: Option<usize>) -> Result<StepResult> {
        if self.is_done() {
            return Err(AplError::InvalidState("episode is over".into()));
        }
        if !action.is_finite() {
            return Err(invalid("action must be finite"));
        }
        if let Some(m) = attended {
            if m >= self.estimate.len() {
                return Err(invalid(format!("attended index {m} out of range")));
            }
        }
        let grid = self.ctx.grid.clone();
        let prev_view = self.current_view();
        let target = attended.map(|m| {
            let e = &self.estimate.selected[m];
            (e.hypothesis.gt_index, e.world_pose.translation)
        });
        let e_prev = target.map(|(g, _)| self.cached_error(g));

        let view = grid.closest_viewpoint(wrap_angle(action.azimuth), action.elevation);
        self.observe(view)?;
        self.views.push(view);
        self.t += 1;
        let travel = grid.geodesic_distance(prev_view, view);
        self.distance += travel;

        let (v0, v1) = (grid.view(prev_view).position, grid.view(view).position);
        let reward = match (target, e_prev) {
            (Some((g, x)), Some(e0)) => reward_terms(e0, self.cached_error(g), Some(x), &v0, &v1, &self.cfg.reward),
            _ => reward_terms(0.0, 0.0, None, &v0, &v1, &self.cfg.reward),
        };
        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.is_done(),
            view_index: view,
            attended_gt: target.map(|(g, _)| g),
            travel,
        })
    }
}

/// Index of the lowest-scoring object, lowest index on ties.
pub fn lowest_score_index(features: &[ObjectFeature]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, f) in features.iter().enumerate() {
        if best.is_none_or(|b| f.c < features[b].c) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Random,
    Unidirectional,
    MaxDistance,
    Entropy,
    /// Visits grid views in index order.
    Sweep,
}

impl BaselineKind {
    pub const TABLE: [BaselineKind; 4] = [
        BaselineKind::Random,
        BaselineKind::Unidirectional,
        BaselineKind::MaxDistance,
        BaselineKind::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Unidirectional => "unidirectional",
            BaselineKind::MaxDistance => "max-distance",
            BaselineKind::Entropy => "entropy",
            BaselineKind::Sweep => "sweep",
        }
    }
}

impl std::fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = AplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineKind::Random),
            "unidirectional" => Ok(BaselineKind::Unidirectional),
            "max-distance" => Ok(BaselineKind::MaxDistance),
            "entropy" => Ok(BaselineKind::Entropy),
            "sweep" => Ok(BaselineKind::Sweep),
            other => Err(invalid(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Grid view farthest (by geodesic distance) from every visited view.
pub fn max_distance_view(grid: &ViewGrid, visited: &[usize]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for v in 0..grid.len() {
        let d = visited
            .iter()
            .map(|&u| grid.geodesic_distance(u, v))
            .fold(f64::INFINITY, f64::min);
        if d > best.1 {
            best = (v, d);
        }
    }
    best.0
}

pub fn baseline_action<R: Rng + ?Sized>(kind: BaselineKind, env: &Env, rng: &mut R) -> Result<Action> {
    let grid = &env.ctx.grid;
    let cur = grid.view(env.current_view());
    let visited = env.visited();
    let next = env.step_index() + 1;
    Ok(match kind {
        BaselineKind::Random => {
            let az = Normal::new(cur.azimuth, RANDOM_BASELINE_SIGMA.0).map_err(|e| invalid(e.to_string()))?;
            let el = Normal::new(cur.elevation, RANDOM_BASELINE_SIGMA.1).map_err(|e| invalid(e.to_string()))?;
            Action {
                azimuth: az.sample(rng),
                elevation: el.sample(rng),
            }
        }
        BaselineKind::Unidirectional => {
            let t = env.config().horizon.max(1) as f64;
            let start = grid.view(visited[0]).azimuth;
            Action {
                azimuth: wrap_angle(start + std::f64::consts::TAU * next as f64 / t),
                elevation: std::f64::consts::FRAC_PI_4,
            }
        }
        BaselineKind::MaxDistance => Action::of_view(grid, max_distance_view(grid, visited)),
        BaselineKind::Entropy => {
            let mut best: Option<usize> = None;
            for v in 0..grid.len() {
                if visited.contains(&v) {
                    continue;
                }
                if best.is_none_or(|b| env.ctx.entropy[v] > env.ctx.entropy[b]) {
                    best = Some(v);
                }
            }
            Action::of_view(grid, best.unwrap_or(env.current_view()))
        }
        BaselineKind::Sweep => Action::of_view(grid, (visited[0] + next) % grid.len()),
    })
}
