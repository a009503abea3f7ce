//! The communication policy: state assembly, action heads and sampling.

pub mod net;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::ckm::CkmState;
use crate::error::{OscError, Result};
use crate::gap::GapVector;
use crate::nn::dist::{clamp_unit, Beta};
use crate::text::{condense_history, AgentId, DialogueAct, DialogueHistory, InternalState, Query};

pub use net::{
    CriticMode, CriticNet, HeadGrads, PolicyNet, PolicyNetConfig, PolicyOutput, StateGrads,
};

/// The fixed catalog of communication objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    QueryUnderstanding,
    ProposeStep,
    ChallengeAssumption,
    AlignPlanElement,
    RequestInformation,
    RequestExplanation,
    ProvideEvidence,
    ConfirmAgreement,
    SummarizeState,
    FlagConflict,
}

pub const OBJECTIVE_COUNT: usize = 10;

impl Objective {
    pub const ALL: [Objective; OBJECTIVE_COUNT] = [
        Objective::QueryUnderstanding,
        Objective::ProposeStep,
        Objective::ChallengeAssumption,
        Objective::AlignPlanElement,
        Objective::RequestInformation,
        Objective::RequestExplanation,
        Objective::ProvideEvidence,
        Objective::ConfirmAgreement,
        Objective::SummarizeState,
        Objective::FlagConflict,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::QueryUnderstanding => "query_understanding",
            Objective::ProposeStep => "propose_step",
            Objective::ChallengeAssumption => "challenge_assumption",
            Objective::AlignPlanElement => "align_plan_element",
            Objective::RequestInformation => "request_information",
            Objective::RequestExplanation => "request_explanation",
            Objective::ProvideEvidence => "provide_evidence",
            Objective::ConfirmAgreement => "confirm_agreement",
            Objective::SummarizeState => "summarize_state",
            Objective::FlagConflict => "flag_conflict",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// Dialogue act a realized message with this objective carries.
    pub fn act(self) -> DialogueAct {
        match self {
            Objective::RequestInformation | Objective::RequestExplanation => DialogueAct::Question,
            Objective::ProposeStep | Objective::AlignPlanElement => DialogueAct::Propose,
            Objective::ChallengeAssumption | Objective::FlagConflict => DialogueAct::Critique,
            Objective::ProvideEvidence | Objective::SummarizeState => DialogueAct::Answer,
            Objective::ConfirmAgreement => DialogueAct::Agree,
            Objective::QueryUnderstanding => DialogueAct::Clarify,
        }
    }

    pub fn is_request(self) -> bool {
        matches!(
            self,
            Objective::RequestInformation | Objective::RequestExplanation
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub detail: f64,
    pub assertiveness: f64,
}

impl Style {
    pub const NEUTRAL: Style = Style {
        detail: 0.5,
        assertiveness: 0.5,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommAction {
    pub objective: Objective,
    pub target: AgentId,
    /// Position of `target` among the speaker's collaborators.
    pub target_index: usize,
    pub style: Style,
    pub log_prob: f64,
    pub entropy: f64,
}

/// Which action components the policy actually decides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub objective: bool,
    pub style: bool,
}

impl Default for ActionMask {
    fn default() -> Self {
        ActionMask {
            objective: true,
            style: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Stochastic,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub phi: Vec<f64>,
    pub query: Vec<f64>,
    pub history: Vec<f64>,
    pub collaborators: Vec<AgentId>,
    pub ckm_block: Vec<Vec<f64>>,
    pub gap_block: Vec<Vec<f64>>,
}

impl PolicyState {
    pub fn seq_len(&self) -> usize {
        3 + 2 * self.collaborators.len()
    }

    pub fn is_finite(&self) -> bool {
        let all = |v: &[f64]| v.iter().all(|x| x.is_finite());
        all(&self.phi)
            && all(&self.query)
            && all(&self.history)
            && self.ckm_block.iter().all(|v| all(v))
            && self.gap_block.iter().all(|v| all(v))
    }
}

/// Collects the policy input for `agent`, collaborators ascending by id.
pub fn assemble_state(
    agent: AgentId,
    q: &Query,
    h: &DialogueHistory,
    phi: &InternalState,
    team: &[AgentId],
    ckm: &[CkmState],
    gaps: &[GapVector],
    window: usize,
) -> Result<PolicyState> {
    let mut collaborators: Vec<AgentId> = team.iter().copied().filter(|a| *a != agent).collect();
    collaborators.sort();
    let mut ckm_block = Vec::with_capacity(collaborators.len());
    let mut gap_block = Vec::with_capacity(collaborators.len());
    for t in &collaborators {
        let s = ckm
            .iter()
            .find(|s| s.observer == agent && s.target == *t)
            .ok_or_else(|| OscError::Lookup(format!("{agent} has no model of {t}")))?;
        let g = gaps
            .iter()
            .find(|g| g.observer == agent && g.target == *t)
            .ok_or_else(|| OscError::Lookup(format!("{agent} has no gap for {t}")))?;
        ckm_block.push(s.z.clone());
        gap_block.push(g.g.clone());
    }
    let state = PolicyState {
        phi: phi.embedding.clone(),
        query: q.embedding.clone(),
        history: condense_history(h, window),
        collaborators,
        ckm_block,
        gap_block,
    };
    if !state.is_finite() {
        return Err(OscError::Numeric(format!("policy state of {agent}")));
    }
    Ok(state)
}

fn sample_beta<R: Rng>(b: &Beta, rng: &mut R) -> f64 {
    let d = rand_distr::Beta::new(b.alpha, b.beta).expect("beta parameters exceed one");
    clamp_unit(d.sample(rng))
}

/// Draws (or, in greedy mode, selects) an action from the policy heads.
pub fn sample_action<R: Rng>(
    out: &PolicyOutput,
    collaborators: &[AgentId],
    mode: SampleMode,
    mask: ActionMask,
    rng: &mut R,
) -> CommAction {
    let (objective, target_index, style) = match mode {
        SampleMode::Greedy => (
            out.objective.argmax(),
            out.target.argmax(),
            Style {
                detail: clamp_unit(out.detail.mean()),
                assertiveness: clamp_unit(out.assertiveness.mean()),
            },
        ),
        SampleMode::Stochastic => {
            let o = out.objective.sample_with(rng.random());
            let t = out.target.sample_with(rng.random());
            let d = sample_beta(&out.detail, rng);
            let a = sample_beta(&out.assertiveness, rng);
            (
                o,
                t,
                Style {
                    detail: d,
                    assertiveness: a,
                },
            )
        }
    };
    let objective = if mask.objective {
        Objective::ALL[objective]
    } else {
        Objective::ProposeStep
    };
    let style = if mask.style { style } else { Style::NEUTRAL };
    let mut action = CommAction {
        objective,
        target: collaborators[target_index],
        target_index,
        style,
        log_prob: 0.0,
        entropy: 0.0,
    };
    action.log_prob = out.log_prob(&action, mask);
    action.entropy = out.entropy(mask);
    action
}

/// Reference action stream for the policy-free ablation: every component
/// uniform, drawn in a fixed order from the episode generator.
pub fn uniform_action<R: Rng>(collaborators: &[AgentId], rng: &mut R) -> CommAction {
    let o = rng.random_range(0..OBJECTIVE_COUNT);
    let t = rng.random_range(0..collaborators.len());
    let detail = clamp_unit(rng.random::<f64>());
    let assertiveness = clamp_unit(rng.random::<f64>());
    let n = collaborators.len() as f64;
    CommAction {
        objective: Objective::ALL[o],
        target: collaborators[t],
        target_index: t,
        style: Style {
            detail,
            assertiveness,
        },
        log_prob: -(OBJECTIVE_COUNT as f64).ln() - n.ln(),
        entropy: (OBJECTIVE_COUNT as f64).ln() + n.ln(),
    }
}
