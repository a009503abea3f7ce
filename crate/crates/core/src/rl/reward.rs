//! Composite step rewards and intrinsic shaping triggers.

use serde::{Deserialize, Serialize};

use crate::error::{OscError, Result};
use crate::gap::GapVector;
use crate::nn::tensor::cosine;
use crate::policy::{CommAction, Objective};
use crate::text::Utterance;

pub const REWARD_SUCCESS: f64 = 1.0;
pub const REWARD_FAILURE: f64 = -0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda_cost: f64,
    /// Charge `lambda_cost` per message token.
    pub use_cost: bool,
    pub shaping: ShapingConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            lambda_cost: 0.001,
            use_cost: true,
            shaping: ShapingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapingConfig {
    pub enabled: bool,
    pub r_shape_value: f64,
    /// Relative drop in gap magnitude that counts as resolution.
    pub gap_drop_fraction: f64,
    /// Gap magnitude above which a pair is in conflict. `None` until calibrated.
    pub tau_conflict: Option<f64>,
    pub semantic_match_threshold: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            enabled: true,
            r_shape_value: 0.05,
            gap_drop_fraction: 0.2,
            tau_conflict: None,
            semantic_match_threshold: 0.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.shaping;
        if self.lambda_cost < 0.0 || s.r_shape_value < 0.0 {
            return Err(OscError::Config(
                "lambda_cost and r_shape_value must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&s.gap_drop_fraction) {
            return Err(OscError::Config(
                "gap_drop_fraction must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.use_cost {
            self.lambda_cost
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub c_comm_tokens: usize,
    pub lambda_cost: f64,
    pub r_shape: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapingEvent {
    GapResolution,
    RequestFulfilled,
}

/// `outcome` is `Some(success)` on the terminal step only.
pub fn step_reward(
    outcome: Option<bool>,
    tokens: usize,
    events: &[ShapingEvent],
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let r_task = match outcome {
        Some(true) => REWARD_SUCCESS,
        Some(false) => REWARD_FAILURE,
        None => 0.0,
    };
    let lambda_cost = cfg.effective_lambda();
    let r_shape = if cfg.shaping.enabled && !events.is_empty() {
        cfg.shaping.r_shape_value
    } else {
        0.0
    };
    RewardBreakdown {
        r_task,
        c_comm_tokens: tokens,
        lambda_cost,
        r_shape,
        total: r_task - lambda_cost * tokens as f64 + r_shape,
    }
}

/// What happened after an action addressed a collaborator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub objective: Objective,
    pub pre_gap: f64,
    /// Gap magnitude after the addressed collaborator's next update.
    pub post_gap: Option<f64>,
    /// Cosine between the reply and the requester's Φ-query direction.
    pub response_cosine: Option<f64>,
}

/// Shaping rules over the scalars recorded in a probe.
pub fn probe_events(p: &Probe, cfg: &ShapingConfig) -> Vec<ShapingEvent> {
    let mut out = Vec::new();
    if let (Some(post), Some(tau)) = (p.post_gap, cfg.tau_conflict) {
        if p.pre_gap > tau && post <= p.pre_gap * (1.0 - cfg.gap_drop_fraction) {
            out.push(ShapingEvent::GapResolution);
        }
    }
    if p.objective == Objective::RequestInformation {
        if let Some(c) = p.response_cosine {
            if c >= cfg.semantic_match_threshold {
                out.push(ShapingEvent::RequestFulfilled);
            }
        }
    }
    out
}

/// Direction a reply must match to fulfil a request: `Φ + q`.
pub fn request_direction(phi: &[f64], query: &[f64]) -> Vec<f64> {
    phi.iter().zip(query).map(|(a, b)| a + b).collect()
}

pub fn detect_shaping_events(
    pre: &GapVector,
    post: Option<&GapVector>,
    action: &CommAction,
    response: Option<&Utterance>,
    requester_direction: &[f64],
    cfg: &ShapingConfig,
) -> Vec<ShapingEvent> {
    let probe = Probe {
        objective: action.objective,
        pre_gap: pre.magnitude,
        post_gap: post.map(|g| g.magnitude),
        response_cosine: response.map(|u| cosine(&u.embedding, requester_direction)),
    };
    probe_events(&probe, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Style;
    use crate::text::AgentId;

    fn cfg(tau: f64) -> ShapingConfig {
        ShapingConfig {
            tau_conflict: Some(tau),
            ..ShapingConfig::default()
        }
    }

    #[test]
    fn worked_reward_examples() {
        let c = RewardConfig::default();
        let r = step_reward(Some(true), 300, &[], &c);
        assert!((r.total - 0.7).abs() < 1e-12);
        assert_eq!(step_reward(Some(false), 0, &[], &c).total, -0.1);
        let r = step_reward(None, 50, &[ShapingEvent::GapResolution], &c);
        assert!(r.total.abs() < 1e-12);
        let two = step_reward(
            None,
            0,
            &[ShapingEvent::GapResolution, ShapingEvent::RequestFulfilled],
            &c,
        );
        assert_eq!(two.r_shape, 0.05);
    }

    #[test]
    fn task_only_has_no_cost_or_shaping() {
        let c = RewardConfig {
            use_cost: false,
            shaping: ShapingConfig {
                enabled: false,
                ..ShapingConfig::default()
            },
            ..RewardConfig::default()
        };
        let r = step_reward(None, 80, &[ShapingEvent::GapResolution], &c);
        assert_eq!((r.lambda_cost, r.r_shape, r.total), (0.0, 0.0, 0.0));
    }

    fn gv(m: f64) -> GapVector {
        let mut g = vec![0.0; 64];
        g[0] = m;
        GapVector {
            observer: AgentId(0),
            target: AgentId(1),
            g,
            magnitude: m,
        }
    }

    fn action(o: Objective) -> CommAction {
        CommAction {
            objective: o,
            target: AgentId(1),
            target_index: 0,
            style: Style::NEUTRAL,
            log_prob: 0.0,
            entropy: 0.0,
        }
    }

    #[test]
    fn gap_resolution_rule() {
        let a = action(Objective::ProposeStep);
        let ev = detect_shaping_events(&gv(1.0), Some(&gv(0.7)), &a, None, &[], &cfg(0.5));
        assert_eq!(ev, vec![ShapingEvent::GapResolution]);
        assert!(
            detect_shaping_events(&gv(1.0), Some(&gv(0.85)), &a, None, &[], &cfg(0.5)).is_empty()
        );
        assert!(
            detect_shaping_events(&gv(1.0), Some(&gv(0.1)), &a, None, &[], &cfg(1.5)).is_empty()
        );
        assert!(detect_shaping_events(&gv(1.0), None, &a, None, &[], &cfg(0.5)).is_empty());
    }

    #[test]
    fn request_rule_needs_request_information() {
        let dir = crate::text::embed_text("agent1=4");
        let reply = Utterance::new(AgentId(1), 2, "agent1=4", None);
        let ev = detect_shaping_events(
            &gv(0.1),
            None,
            &action(Objective::RequestInformation),
            Some(&reply),
            &dir,
            &cfg(0.5),
        );
        assert_eq!(ev, vec![ShapingEvent::RequestFulfilled]);
        let ev = detect_shaping_events(
            &gv(0.1),
            None,
            &action(Objective::ProposeStep),
            Some(&reply),
            &dir,
            &cfg(0.5),
        );
        assert!(ev.is_empty());
    }
}
