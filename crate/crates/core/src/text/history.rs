//! Utterances, queries, dialogue history and agent internal states.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use super::embed::{embed_text, normalize, EMBED_DIM};
use super::tokenize;
use crate::error::{OscError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueAct {
    Question,
    Answer,
    Propose,
    Critique,
    Agree,
    Clarify,
}

impl DialogueAct {
    pub const ALL: [DialogueAct; 6] = [
        DialogueAct::Question,
        DialogueAct::Answer,
        DialogueAct::Propose,
        DialogueAct::Critique,
        DialogueAct::Agree,
        DialogueAct::Clarify,
    ];

    pub fn index(self) -> usize {
        DialogueAct::ALL.iter().position(|a| *a == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            DialogueAct::Question => "question",
            DialogueAct::Answer => "answer",
            DialogueAct::Propose => "propose",
            DialogueAct::Critique => "critique",
            DialogueAct::Agree => "agree",
            DialogueAct::Clarify => "clarify",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        DialogueAct::ALL.iter().copied().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: AgentId,
    pub round: usize,
    pub text: String,
    pub tokens: Vec<String>,
    pub act: Option<DialogueAct>,
    pub embedding: Vec<f64>,
}

impl Utterance {
    pub fn new(
        speaker: AgentId,
        round: usize,
        text: impl Into<String>,
        act: Option<DialogueAct>,
    ) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        let embedding = super::feature_embed(&tokens);
        Utterance {
            speaker,
            round,
            text,
            tokens,
            act,
            embedding,
        }
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    HiddenSum,
    Dialogue,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub text: String,
    pub embedding: Vec<f64>,
    pub task_kind: TaskKind,
}

impl Query {
    pub fn new(text: impl Into<String>, task_kind: TaskKind) -> Self {
        let text = text.into();
        let embedding = embed_text(&text);
        Query {
            text,
            embedding,
            task_kind,
        }
    }
}

/// Append-only, round-ordered record of the shared dialogue.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DialogueHistory {
    utterances: Vec<Utterance>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, u: Utterance) -> Result<()> {
        if let Some(last) = self.utterances.last() {
            if u.round < last.round {
                return Err(OscError::Contract(format!(
                    "utterance for round {} appended after round {}",
                    u.round, last.round
                )));
            }
        }
        self.utterances.push(u);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn last(&self) -> Option<&Utterance> {
        self.utterances.last()
    }

    /// Index of the first utterance of each round present.
    pub fn round_boundaries(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (i, u) in self.utterances.iter().enumerate() {
            if out.last().map(|(r, _)| *r) != Some(u.round) {
                out.push((u.round, i));
            }
        }
        out
    }

    /// The speaker's last `n` utterances, oldest first.
    pub fn last_by(&self, speaker: AgentId, n: usize) -> Vec<&Utterance> {
        let mut v: Vec<&Utterance> = self
            .utterances
            .iter()
            .rev()
            .filter(|u| u.speaker == speaker)
            .take(n)
            .collect();
        v.reverse();
        v
    }
}

pub const DEFAULT_HISTORY_WINDOW: usize = 5;

/// Re-normalized mean of the last `window` utterance embeddings.
pub fn condense_history(h: &DialogueHistory, window: usize) -> Vec<f64> {
    let window = window.max(1);
    let us = h.utterances();
    let tail = &us[us.len().saturating_sub(window)..];
    let mut v = vec![0.0; EMBED_DIM];
    for u in tail {
        for (a, b) in v.iter_mut().zip(&u.embedding) {
            *a += b;
        }
    }
    if !tail.is_empty() {
        let n = tail.len() as f64;
        v.iter_mut().for_each(|x| *x /= n);
    }
    normalize(&mut v);
    v
}

/// Task data an agent holds privately.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivatePayload {
    /// The agent's own hidden value, if the task has one.
    pub share: Option<u8>,
    /// Other agents' values learned from the dialogue.
    pub known: BTreeMap<AgentId, u8>,
    pub plan: String,
}

impl PrivatePayload {
    /// Facts as `agentN=V` tokens, own value first.
    pub fn fact_text(&self, owner: AgentId) -> String {
        let mut parts = Vec::new();
        if let Some(s) = self.share {
            parts.push(format!("{owner}={s}"));
        }
        for (a, v) in &self.known {
            if *a != owner {
                parts.push(format!("{a}={v}"));
            }
        }
        parts.join(" ")
    }
}

/// Φ: an agent's own cognitive state.
#[derive(Clone, Debug, PartialEq)]
pub struct InternalState {
    pub owner: AgentId,
    pub embedding: Vec<f64>,
    pub private_payload: PrivatePayload,
}

impl InternalState {
    pub fn derive(owner: AgentId, payload: PrivatePayload, q: &Query) -> Self {
        let text = format!(
            "{owner} knows {} . plan : {} . task : {}",
            payload.fact_text(owner),
            payload.plan,
            q.text
        );
        InternalState {
            owner,
            embedding: embed_text(&text),
            private_payload: payload,
        }
    }
}
