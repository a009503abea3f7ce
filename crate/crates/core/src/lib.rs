//! Multi-agent collaboration engine: collaborator knowledge models, learned
//! cognitive gaps and a communication policy trained end-to-end with PPO.

pub mod ckm;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod gap;
pub mod metrics;
pub mod nn;
pub mod policy;
pub mod rl;
pub mod text;

pub use error::{OscError, Result};
