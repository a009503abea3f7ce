//! Structured prompts handed to a realization backend.

use serde::{Deserialize, Serialize};

use crate::ckm::CkmState;
use crate::gap::GapVector;
use crate::policy::{CommAction, Objective};
use crate::text::{tokenize, AgentId, DialogueHistory, InternalState, Query};

pub const PROMPT_TOKEN_LIMIT: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    /// Cuts at 1/3 and 2/3.
    pub fn of(x: f64) -> Level {
        if x < 1.0 / 3.0 {
            Level::Low
        } else if x < 2.0 / 3.0 {
            Level::Medium
        } else {
            Level::High
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Medium => "medium",
            Level::High => "high",
        }
    }

    pub fn tone(self) -> &'static str {
        match self {
            Level::Low => "perhaps",
            Level::Medium => "plainly",
            Level::High => "definitely",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionBlock {
    pub objective: Objective,
    pub target: AgentId,
    pub detail: Level,
    pub assertiveness: Level,
}

impl ActionBlock {
    pub fn render(&self) -> String {
        format!(
            "objective: {} toward {}. style: {} detail, {} assertiveness.",
            self.objective.name(),
            self.target,
            self.detail.word(),
            self.assertiveness.word()
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizationDirective {
    pub speaker: AgentId,
    pub role_context: Option<String>,
    pub history: Vec<String>,
    pub collaborator_assessment: Option<String>,
    pub own_state: Option<String>,
    pub gap_focus: Option<String>,
    pub action: ActionBlock,
    /// Collaborators whose information requests to the speaker are open.
    pub open_requests: Vec<AgentId>,
    pub max_tokens: usize,
}

/// Everything besides the action that a directive draws on.
pub struct DirectiveContext<'a> {
    pub query: &'a Query,
    pub team: &'a [AgentId],
    pub history: &'a DialogueHistory,
    pub history_window: usize,
    pub open_requests: Vec<AgentId>,
    pub simplified: bool,
}

/// Indices of the three largest-magnitude coordinates, largest first.
pub fn top_coordinates(g: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

pub fn build_directive(
    action: &CommAction,
    phi: &InternalState,
    target_model: &CkmState,
    gap: &GapVector,
    ctx: &DirectiveContext,
) -> RealizationDirective {
    let block = ActionBlock {
        objective: action.objective,
        target: action.target,
        detail: Level::of(action.style.detail),
        assertiveness: Level::of(action.style.assertiveness),
    };
    if ctx.simplified {
        return RealizationDirective {
            speaker: phi.owner,
            role_context: None,
            history: Vec::new(),
            collaborator_assessment: None,
            own_state: None,
            gap_focus: None,
            action: block,
            open_requests: ctx.open_requests.clone(),
            max_tokens: PROMPT_TOKEN_LIMIT,
        };
    }
    let peers: Vec<String> = ctx
        .team
        .iter()
        .filter(|a| **a != phi.owner)
        .map(|a| a.to_string())
        .collect();
    let role = format!(
        "you are {}, collaborating with {} on the task: {}",
        phi.owner,
        peers.join(", "),
        ctx.query.text
    );
    let us = ctx.history.utterances();
    let history = us[us.len().saturating_sub(ctx.history_window)..]
        .iter()
        .map(|u| format!("{} (round {}): {}", u.speaker, u.round, u.text))
        .collect();
    let coords: Vec<String> = top_coordinates(&gap.g, 3)
        .into_iter()
        .map(|i| format!("g{i}{}", if gap.g[i] < 0.0 { "-" } else { "+" }))
        .collect();
    let assessment = format!(
        "model of {} last updated in round {}; strongest gap coordinates: {}",
        target_model.target,
        target_model.last_update_round,
        coords.join(" ")
    );
    let facts = phi.private_payload.fact_text(phi.owner);
    let own = format!(
        "you know: {}",
        if facts.is_empty() {
            "nothing yet"
        } else {
            facts.as_str()
        }
    );
    let focus = format!(
        "focus on {} (gap magnitude {:.3})",
        gap.target, gap.magnitude
    );
    RealizationDirective {
        speaker: phi.owner,
        role_context: Some(role),
        history,
        collaborator_assessment: Some(assessment),
        own_state: Some(own),
        gap_focus: Some(focus),
        action: block,
        open_requests: ctx.open_requests.clone(),
        max_tokens: PROMPT_TOKEN_LIMIT,
    }
}

impl RealizationDirective {
    fn user_blocks(&self, history: &[String]) -> String {
        let mut out = Vec::new();
        if !history.is_empty() {
            out.push(format!("recent dialogue:\n{}", history.join("\n")));
        }
        if let Some(s) = &self.collaborator_assessment {
            out.push(format!("collaborator assessment: {s}"));
        }
        if let Some(s) = &self.own_state {
            out.push(format!("own state: {s}"));
        }
        if let Some(s) = &self.gap_focus {
            out.push(format!("gap focus: {s}"));
        }
        out.push(self.action.render());
        if !self.open_requests.is_empty() {
            let who: Vec<String> = self.open_requests.iter().map(|a| a.to_string()).collect();
            out.push(format!(
                "open requests from {}: state your own value.",
                who.join(", ")
            ));
        }
        out.push(format!("reply in at most {} tokens.", self.max_tokens));
        out.join("\n")
    }

    /// `(system, user)` prompt text, dropping the oldest history lines
    /// until the prompt fits the token limit.
    pub fn render(&self) -> (String, String) {
        let system = self.role_context.clone().unwrap_or_default();
        let mut start = 0;
        loop {
            let user = self.user_blocks(&self.history[start..]);
            let n = tokenize(&system).len() + tokenize(&user).len();
            if n <= self.max_tokens || start == self.history.len() {
                return (system, user);
            }
            start += 1;
        }
    }
}
