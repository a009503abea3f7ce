//! Deterministic text featurization.

pub mod corpus;
pub mod embed;
pub mod history;
pub mod profile;
pub mod tokenize;

pub use embed::{embed_text, feature_embed, EMBED_DIM};
pub use history::{
    condense_history, AgentId, DialogueAct, DialogueHistory, InternalState, PrivatePayload, Query,
    TaskKind, Utterance,
};
pub use profile::{profile_dimensions, CandidateDimensionProfile, ProfileMask, PROFILE_DIM};
pub use tokenize::tokenize;
