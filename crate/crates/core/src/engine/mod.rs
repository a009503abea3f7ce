//! The episode engine: configuration, task, directives, realization and traces.

pub mod backend;
pub mod config;
pub mod directive;
pub mod episode;
pub mod models;
pub mod task;
pub mod trace;

pub use backend::{Backend, HttpBackend, HttpConfig};
pub use config::{Ablations, BackendKind, EpisodeConfig};
pub use episode::{episode_rngs, run_episode, EpisodeOutput, StepInputs, Transition};
pub use models::{ModelConfig, Models};
pub use trace::{read_traces, replay_rewards, write_traces, EpisodeTrace};
