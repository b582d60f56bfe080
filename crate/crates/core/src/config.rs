//! TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::env::{EnvConfig, RewardConfig, StartView};
use crate::error::{AplError, Result};
use crate::estimator::NoiseModel;
use crate::fusion::DEFAULT_EPSILON;
use crate::geom::{Vec3, ViewGrid};
use crate::ppo::TrainConfig;
use crate::scene::{Intrinsics, ModelKind, DEFAULT_MODEL_POINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesConfig {
    pub model: ModelKind,
    pub model_points: usize,
    pub model_seed: u64,
    /// Inclusive object-count range; the model's default when absent.
    pub instances: Option<[usize; 2]>,
    pub train_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        ScenesConfig {
            model: ModelKind::Cup,
            model_points: DEFAULT_MODEL_POINTS,
            model_seed: 7,
            instances: None,
            train_seeds: (0..20).collect(),
            eval_seeds: (1000..1010).collect(),
        }
    }
}

impl ScenesConfig {
    pub fn instance_range(&self) -> (usize, usize) {
        match self.instances {
            Some([lo, hi]) => (lo, hi),
            None => self.model.instance_range(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub radius: f64,
    pub azimuth_levels: usize,
    pub elevation_levels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            radius: 800.0,
            azimuth_levels: 20,
            elevation_levels: 5,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<ViewGrid> {
        ViewGrid::build(self.radius, self.azimuth_levels, self.elevation_levels, Vec3::zeros())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub horizon: usize,
    pub epsilon: f64,
    pub reward: RewardConfig,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            horizon: 5,
            epsilon: DEFAULT_EPSILON,
            reward: RewardConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Baseline names, `learned`, or `learned-lowest-score`.
    pub policies: Vec<String>,
    /// Use this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub log_episodes: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1,
            seed: 0,
            policies: ["random", "unidirectional", "max-distance", "entropy"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            checkpoint: None,
            log_episodes: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub scenes: ScenesConfig,
    pub grid: GridConfig,
    pub camera: Intrinsics,
    pub estimator: NoiseModel,
    pub env: EnvSection,
    pub attention: AttentionMode,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs/experiment"),
            scenes: ScenesConfig::default(),
            grid: GridConfig::default(),
            camera: Intrinsics::default(),
            estimator: NoiseModel::default(),
            env: EnvSection::default(),
            attention: AttentionMode::Learned,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| AplError::Config {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| match e {
            AplError::Config { .. } => e,
            other => AplError::Config {
                line: 0,
                message: other.to_string(),
            },
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AplError::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| AplError::Config { line: 0, message };
        if let Some(s) = self.scenes.train_seeds.iter().find(|s| self.scenes.eval_seeds.contains(s)) {
            return Err(bad(format!("scene seed {s} appears in both train_seeds and eval_seeds")));
        }
        if self.scenes.eval_seeds.is_empty() {
            return Err(bad("eval_seeds is empty".into()));
        }
        let (lo, hi) = self.scenes.instance_range();
        if lo == 0 || lo > hi {
            return Err(bad(format!("instance range [{lo}, {hi}] is invalid")));
        }
        self.grid.build()?;
        self.camera.validate()?;
        self.env_config().validate()?;
        self.train.validate()?;
        for p in &self.eval.policies {
            if p != "learned" && p != "learned-lowest-score" {
                p.parse::<crate::env::BaselineKind>()?;
            }
        }
        Ok(())
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            horizon: self.env.horizon,
            reward: self.env.reward,
            noise: self.estimator,
            epsilon: self.env.epsilon,
            start: StartView::First,
        }
    }

    pub fn needs_agent(&self) -> bool {
        self.eval.policies.iter().any(|p| p.starts_with("learned"))
    }
}
