//! The hidden-sum task.
//!
//! Every agent privately holds a digit. The team must report the sum of all
//! digits modulo 10, so each digit has to be spoken by someone before the
//! final contributions are made. Facts travel as `agentN=V` tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::text::{AgentId, PrivatePayload, Query, TaskKind};

pub const HIDDEN_SUM_QUERY: &str = "what is the sum of all hidden values modulo 10 ?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenSumTask {
    pub shares: Vec<u8>,
    pub truth: u8,
}

impl HiddenSumTask {
    pub fn sample<R: Rng>(agents: usize, rng: &mut R) -> Self {
        let shares: Vec<u8> = (0..agents).map(|_| rng.random_range(0..=9)).collect();
        let truth = (shares.iter().map(|&s| s as u32).sum::<u32>() % 10) as u8;
        HiddenSumTask { shares, truth }
    }

    pub fn query(&self) -> Query {
        Query::new(HIDDEN_SUM_QUERY, TaskKind::HiddenSum)
    }

    pub fn payload(&self, agent: AgentId) -> PrivatePayload {
        PrivatePayload {
            share: Some(self.shares[agent.0]),
            known: BTreeMap::new(),
            plan: "share values and add them".into(),
        }
    }
}

/// Extracts `agentN=V` facts from message text.
pub fn parse_facts(text: &str) -> Vec<(AgentId, u8)> {
    text.split_whitespace()
        .filter_map(|w| {
            let (name, value) = w.split_once('=')?;
            let id: usize = name.strip_prefix("agent")?.parse().ok()?;
            let v: u8 = value.parse().ok()?;
            (v <= 9).then_some((AgentId(id), v))
        })
        .collect()
}

/// Adds newly seen facts to `payload`; returns whether anything changed.
pub fn absorb_facts(owner: AgentId, payload: &mut PrivatePayload, text: &str) -> bool {
    let mut changed = false;
    for (a, v) in parse_facts(text) {
        if a != owner && payload.known.insert(a, v) != Some(v) {
            changed = true;
        }
    }
    changed
}

/// The value an agent believes in: the sum of everything it knows.
pub fn belief(payload: &PrivatePayload) -> u8 {
    let own = payload.share.unwrap_or(0) as u32;
    let rest: u32 = payload.known.values().map(|&v| v as u32).sum();
    ((own + rest) % 10) as u8
}

pub fn knows_all(owner: AgentId, payload: &PrivatePayload, agents: usize) -> bool {
    (0..agents).all(|i| AgentId(i) == owner || payload.known.contains_key(&AgentId(i)))
}

pub fn contribution_text(payload: &PrivatePayload) -> String {
    format!("answer {}", belief(payload))
}

/// Reads the first digit token of a contribution; `None` is an abstention.
pub fn parse_contribution(text: &str) -> Option<u8> {
    crate::text::tokenize(text)
        .iter()
        .find_map(|t| t.parse::<u8>().ok().filter(|v| *v <= 9))
}

/// Plurality vote over parsed contributions, ties to the smallest value.
pub fn aggregate_values(contributions: &[String]) -> Option<u8> {
    let mut counts = [0usize; 10];
    for c in contributions {
        if let Some(v) = parse_contribution(c) {
            counts[v as usize] += 1;
        }
    }
    let best = *counts.iter().max()?;
    if best == 0 {
        return None;
    }
    counts.iter().position(|&c| c == best).map(|v| v as u8)
}
