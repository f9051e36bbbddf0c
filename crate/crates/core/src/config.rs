//! Run configuration: one JSON document covering data paths, model sizes,
//! sampling scheme, policy/PPO settings, reward shaping, loss schedules, and
//! optimizer defaults. Every artifact a run emits embeds this config.

use crate::error::{Error, Result};
use crate::sampler::{SamplerConfig, SchemeKind};
use crate::schedule::LossSchedule;
use crate::tcm::AggregationKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset manifest CSV; bag paths resolve relative to its directory.
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature/model width; must match the dataset's feature dimension.
    pub dim: usize,
    pub heads: usize,
    /// Instances per sampled group (M).
    pub group_size: usize,
    /// Hidden width of the recurrent policy core.
    pub policy_hidden: usize,
    pub aggregation: AggregationKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            group_size: 128,
            policy_hidden: 64,
            aggregation: AggregationKind::ClassToken,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSection {
    pub scheme: SchemeKind,
    pub ghss_alpha: f64,
    /// `None` derives the spatial scale from each bag's median pairwise
    /// coordinate distance.
    pub ghss_tau: Option<f64>,
    /// Group count for the k-means / random-group baselines.
    pub n_groups: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { scheme: SchemeKind::Liis, ghss_alpha: 0.5, ghss_tau: None, n_groups: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionConfig {
    /// Exploration deviation of the Gaussian query head.
    pub sigma: f64,
    /// Interpolation coefficients the categorical head chooses between.
    pub beta_grid: Vec<f64>,
}

impl Default for ActionConfig {
    fn default() -> Self {
        ActionConfig { sigma: 0.1, beta_grid: (0..=10).map(|i| i as f64 / 10.0).collect() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    /// Full-batch passes per update.
    pub epochs: usize,
    pub gamma: f64,
    /// Episodes collected between updates.
    pub batch_episodes: usize,
    /// Policy learning rate, separate from the classifier's.
    pub lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip_eps: 0.2, epochs: 4, gamma: 1.0, batch_episodes: 8, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Reward paid on a correct bag prediction.
    pub r_star: f64,
    /// Ablation switch for the prediction-consistency reward.
    pub use_reward: bool,
    /// Ablation switch for the similarity penalty.
    pub use_penalty: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r_star: 1.0, use_reward: true, use_penalty: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lambda_stl_start: f64,
    pub lambda_stl_end: f64,
    pub lambda_sia_start: f64,
    pub lambda_sia_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lambda_stl_start: 1.0,
            lambda_stl_end: 0.1,
            lambda_sia_start: 0.1,
            lambda_sia_end: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 1e-4, weight_decay: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Bags per gradient step; the trainer is defined at batch size 1.
    pub batch_size: usize,
    pub seed: u64,
    /// Also evaluate the test split each epoch and log its metrics.
    pub track_test_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 300, batch_size: 1, seed: 7, track_test_metrics: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub sampler: SamplerSection,
    pub action: ActionConfig,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.dim == 0 || self.model.heads == 0 {
            return Err(Error::InvalidConfig("model.dim and model.heads must be >= 1".into()));
        }
        if self.model.dim % self.model.heads != 0 {
            return Err(Error::InvalidConfig("model.dim must be divisible by model.heads".into()));
        }
        if self.model.dim % 2 != 0 {
            return Err(Error::InvalidConfig("model.dim must be even".into()));
        }
        if self.model.group_size == 0 {
            return Err(Error::InvalidConfig("model.group_size must be >= 1".into()));
        }
        if self.model.policy_hidden == 0 {
            return Err(Error::InvalidConfig("model.policy_hidden must be >= 1".into()));
        }
        if self.action.sigma <= 0.0 {
            return Err(Error::InvalidConfig("action.sigma must be > 0".into()));
        }
        if !(self.ppo.clip_eps > 0.0 && self.ppo.clip_eps < 1.0) {
            return Err(Error::InvalidConfig("ppo.clip_eps must be in (0, 1)".into()));
        }
        if self.ppo.epochs == 0 || self.ppo.batch_episodes == 0 {
            return Err(Error::InvalidConfig("ppo.epochs and ppo.batch_episodes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ppo.gamma) {
            return Err(Error::InvalidConfig("ppo.gamma must be in [0, 1]".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::InvalidConfig("train.epochs must be >= 1".into()));
        }
        if self.train.batch_size != 1 {
            return Err(Error::InvalidConfig("train.batch_size must be 1".into()));
        }
        self.sampler_config().validate()?;
        Ok(())
    }

    /// The runtime sampler configuration implied by the model and sampler
    /// sections.
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            scheme: self.sampler.scheme,
            group_size: self.model.group_size,
            ghss_alpha: self.sampler.ghss_alpha,
            ghss_tau: self.sampler.ghss_tau,
            liis_beta_grid: self.action.beta_grid.clone(),
            n_groups: self.sampler.n_groups,
        }
    }

    /// Loss-coefficient schedule over the configured epoch budget.
    pub fn loss_schedule(&self) -> LossSchedule {
        LossSchedule {
            lambda_stl_start: self.schedule.lambda_stl_start,
            lambda_stl_end: self.schedule.lambda_stl_end,
            lambda_sia_start: self.schedule.lambda_sia_start,
            lambda_sia_end: self.schedule.lambda_sia_end,
            total_epochs: self.train.epochs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable hash of the canonical JSON form, recorded in checkpoints.
    pub fn hash(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("config serializes");
        crate::rng::mix_str(0x9a71_cafe_0001, &canonical)
    }
}

/// Version string embedded in reports: crate version plus the git describe
/// captured at build time when available.
pub fn version_string() -> String {
    match option_env!("PAMIL_GIT_DESCRIBE") {
        Some(desc) if !desc.is_empty() => format!("pamil {} ({desc})", env!("CARGO_PKG_VERSION")),
        _ => format!("pamil {}", env!("CARGO_PKG_VERSION")),
    }
}
