//! Run configuration: one TOML file covering every component.
//!
//! ```toml
//! [episode]            # agents, n_round, backend, task, seed, query, broadcast, log_states
//! [episode.ablations]  # the thirteen ablation switches
//! [model.ckm]          # collaborator encoder and update cell
//! [model.gap]          # gap network
//! [model.policy]       # policy trunk and critic
//! [ppo]                # optimizer and loss settings
//! [train]              # total_steps, checkpoint_every, freeze_ckm, freeze_gap
//! [reward]             # lambda_cost, use_cost
//! [reward.shaping]     # r_shape_value, gap_drop_fraction, tau_conflict, semantic_match_threshold
//! [pretrain]           # epochs, learning_rate, batch_size, margin, seed, dialogues
//! [eval]               # episodes, calibration_episodes
//! [backend.http]       # base_url, model, aggregator_model, sampling and retry settings
//! ```
//!
//! Unknown keys are rejected. Missing keys take their defaults.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::ckm::pretrain::PretrainConfig;
use crate::engine::{EpisodeConfig, HttpConfig, ModelConfig};
use crate::error::{OscError, Result};
use crate::policy::{CriticMode, PolicyNetConfig};
use crate::rl::{PpoConfig, RewardConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: u64,
    /// Random-policy episodes used to set the conflict threshold.
    pub calibration_episodes: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 200,
            calibration_episodes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub dialogues: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            dialogues: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub http: HttpConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub episode: EpisodeConfig,
    pub model: ModelConfig,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub pretrain: PretrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub backend: BackendConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| OscError::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OscError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| OscError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_toml()?;
        std::fs::write(path, text).map_err(|e| OscError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.model.ckm.validate()?;
        self.model.gap.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        if self.eval.episodes == 0 {
            return Err(OscError::Config("eval.episodes must be positive".into()));
        }
        Ok(())
    }

    /// Laptop-scale settings: a one-layer 32-wide policy trunk, four PPO
    /// epochs per update and 50k training steps.
    pub fn desk() -> Self {
        let mut c = RunConfig::default();
        c.model.policy = PolicyNetConfig {
            layers: 1,
            heads: 2,
            model_dim: 32,
            ff_dim: 64,
            critic: CriticMode::Shared,
            detach_critic: false,
        };
        c.ppo.epochs_per_update = 4;
        c.ppo.lr_policy = 1e-3;
        c.ppo.lr_critic = 3e-3;
        c.train.total_steps = 50_000;
        c.train.checkpoint_every = 0;
        c
    }

    /// Brings the model architecture in line with the ablation flags.
    pub fn resolve(&mut self) {
        self.model.gap_variant = self.episode.ablations.gap_variant();
    }
}
