//! Rewards, advantage estimation and PPO training.

pub mod gae;
pub mod ppo;
pub mod reward;
pub mod train;

pub use gae::{compute_gae, normalize_advantages, Gae};
pub use ppo::{batch_loss, clipped_surrogate, ppo_update, LossStats, PpoConfig, Sample, Trainable};
pub use reward::{RewardBreakdown, RewardConfig, ShapingConfig};
pub use train::{calibrate_tau_conflict, evaluate, rollout, train, TrainConfig, UpdateLog};
