//! Episode configuration and ablation flags.

use serde::{Deserialize, Serialize};

use crate::error::{OscError, Result};
use crate::gap::GapVariant;
use crate::policy::ActionMask;
use crate::text::{ProfileMask, TaskKind};

pub const MIN_AGENTS: usize = 2;
pub const MAX_AGENTS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = OscError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stub" => Ok(BackendKind::Stub),
            "http" => Ok(BackendKind::Http),
            other => Err(OscError::Config(format!(
                "unknown backend {other:?} (expected stub or http)"
            ))),
        }
    }
}

/// Component ablations. Flags are independent switches; a few pairs
/// contradict each other and are rejected by [`Ablations::validate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablations {
    pub no_ckm: bool,
    pub no_gap: bool,
    pub no_policy: bool,
    pub no_shaping: bool,
    pub fixed_objective: bool,
    pub no_style: bool,
    pub simplified_prompt: bool,
    pub gap_l2: bool,
    pub gap_mlp: bool,
    pub update_avg: bool,
    pub update_static: bool,
    pub ckm_ling_only: bool,
    pub ckm_reas_only: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 13] = [
        "no_ckm",
        "no_gap",
        "no_policy",
        "no_shaping",
        "fixed_objective",
        "no_style",
        "simplified_prompt",
        "gap_l2",
        "gap_mlp",
        "update_avg",
        "update_static",
        "ckm_ling_only",
        "ckm_reas_only",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "no_ckm" => &mut self.no_ckm,
            "no_gap" => &mut self.no_gap,
            "no_policy" => &mut self.no_policy,
            "no_shaping" => &mut self.no_shaping,
            "fixed_objective" => &mut self.fixed_objective,
            "no_style" => &mut self.no_style,
            "simplified_prompt" => &mut self.simplified_prompt,
            "gap_l2" => &mut self.gap_l2,
            "gap_mlp" => &mut self.gap_mlp,
            "update_avg" => &mut self.update_avg,
            "update_static" => &mut self.update_static,
            "ckm_ling_only" => &mut self.ckm_ling_only,
            "ckm_reas_only" => &mut self.ckm_reas_only,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str) -> Result<()> {
        let slot = self
            .slot(name.trim())
            .ok_or_else(|| OscError::Config(format!("unknown ablation flag {name:?}")))?;
        *slot = true;
        Ok(())
    }

    /// Parses a comma-separated flag list.
    pub fn parse_list(list: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for name in list.split(',').filter(|s| !s.trim().is_empty()) {
            a.set(name)?;
        }
        a.validate()?;
        Ok(a)
    }

    pub fn single(name: &str) -> Result<Self> {
        Self::parse_list(name)
    }

    pub fn active(&self) -> Vec<&'static str> {
        let mut copy = *self;
        Self::NAMES
            .into_iter()
            .filter(|n| *copy.slot(n).expect("known flag"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let clash = |a: bool, b: bool, what: &str| {
            if a && b {
                Err(OscError::Config(format!(
                    "contradictory ablation flags: {what}"
                )))
            } else {
                Ok(())
            }
        };
        clash(self.no_gap, self.gap_l2, "no_gap + gap_l2")?;
        clash(self.no_gap, self.gap_mlp, "no_gap + gap_mlp")?;
        clash(self.gap_l2, self.gap_mlp, "gap_l2 + gap_mlp")?;
        clash(
            self.update_avg,
            self.update_static,
            "update_avg + update_static",
        )?;
        clash(
            self.ckm_ling_only,
            self.ckm_reas_only,
            "ckm_ling_only + ckm_reas_only",
        )?;
        clash(
            self.no_ckm,
            self.update_avg || self.update_static,
            "no_ckm + an update variant",
        )?;
        clash(
            self.no_ckm,
            self.ckm_ling_only || self.ckm_reas_only,
            "no_ckm + a feature mask",
        )?;
        clash(
            self.no_policy,
            self.fixed_objective || self.no_style,
            "no_policy + an action restriction",
        )?;
        Ok(())
    }

    pub fn gap_variant(&self) -> GapVariant {
        if self.no_gap {
            GapVariant::Difference
        } else if self.gap_l2 {
            GapVariant::L2
        } else if self.gap_mlp {
            GapVariant::Mlp
        } else {
            GapVariant::Learned
        }
    }

    pub fn profile_mask(&self) -> ProfileMask {
        if self.ckm_ling_only {
            ProfileMask::LinguisticOnly
        } else if self.ckm_reas_only {
            ProfileMask::ReasoningOnly
        } else {
            ProfileMask::Full
        }
    }

    pub fn action_mask(&self) -> ActionMask {
        ActionMask {
            objective: !self.fixed_objective,
            style: !self.no_style,
        }
    }

    /// Whether the learned collaborator models receive gradients.
    pub fn ckm_trainable(&self) -> bool {
        !self.no_ckm && !self.update_avg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub agents: usize,
    pub n_round: usize,
    pub backend: BackendKind,
    pub task: TaskKind,
    pub seed: u64,
    /// Question posed in the open dialogue task.
    pub query: String,
    /// Deliver every message to all peers instead of a single target.
    pub broadcast: bool,
    pub ablations: Ablations,
    /// Record every collaborator state vector in the trace.
    pub log_states: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            agents: 4,
            n_round: 4,
            backend: BackendKind::Stub,
            task: TaskKind::HiddenSum,
            seed: 0,
            query: String::new(),
            broadcast: false,
            ablations: Ablations::default(),
            log_states: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_AGENTS..=MAX_AGENTS).contains(&self.agents) {
            return Err(OscError::Config(format!(
                "agent count {} outside {MIN_AGENTS}..={MAX_AGENTS}",
                self.agents
            )));
        }
        if self.n_round == 0 {
            return Err(OscError::Config("n_round must be positive".into()));
        }
        if self.task == TaskKind::Dialogue && self.backend == BackendKind::Stub {
            return Err(OscError::Config(
                "the open dialogue task needs the http backend".into(),
            ));
        }
        if self.task == TaskKind::Dialogue && self.query.trim().is_empty() {
            return Err(OscError::Config(
                "the open dialogue task needs episode.query".into(),
            ));
        }
        self.ablations.validate()
    }
}
