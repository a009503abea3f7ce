//! Communication-efficiency metrics computed from stored traces.
//!
//! The three quality metrics are artifact definitions:
//! - redundancy: share of a message's word 3-grams already seen earlier in
//!   the episode, averaged over every message after the first;
//! - conflict resolution: pairs whose gap magnitude ever exceeded
//!   `tau_conflict` and ended at or below `tau_resolve`;
//! - information density: clipped cosine between each message and the query.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};

use crate::engine::EpisodeTrace;
use crate::nn::tensor::cosine;
use crate::text::{embed_text, tokenize, AgentId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommMetrics {
    pub avg_rounds: f64,
    pub avg_tokens_k: f64,
    pub redundancy_pct: f64,
    pub conflict_resolution_pct: f64,
    pub info_density_pct: f64,
    /// Set when no pair ever crossed the conflict threshold.
    pub no_conflicts: bool,
}

fn trigrams(tokens: &[String]) -> Vec<[&str; 3]> {
    tokens
        .windows(3)
        .map(|w| [w[0].as_str(), w[1].as_str(), w[2].as_str()])
        .collect()
}

/// Per-message redundancy values for one list of messages.
pub fn message_redundancy(messages: &[&str]) -> Vec<f64> {
    let mut seen: HashSet<[String; 3]> = HashSet::new();
    let mut out = Vec::with_capacity(messages.len().saturating_sub(1));
    for (i, m) in messages.iter().enumerate() {
        let toks = tokenize(m);
        let grams = trigrams(&toks);
        if i > 0 {
            let r = if grams.is_empty() {
                0.0
            } else {
                grams
                    .iter()
                    .filter(|g| seen.contains(&g.map(str::to_string)))
                    .count() as f64
                    / grams.len() as f64
            };
            out.push(r);
        }
        for g in grams {
            seen.insert(g.map(str::to_string));
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn redundancy(trace: &EpisodeTrace) -> f64 {
    let msgs: Vec<&str> = trace.steps.iter().map(|s| s.message.as_str()).collect();
    100.0 * mean(&message_redundancy(&msgs))
}

/// `(detected, resolved)` conflict pairs in one trace.
pub fn conflict_counts(
    trace: &EpisodeTrace,
    tau_conflict: f64,
    tau_resolve: f64,
) -> (usize, usize) {
    let mut conflicts: BTreeSet<(AgentId, AgentId)> = BTreeSet::new();
    for s in &trace.steps {
        for g in &s.gaps {
            if g.magnitude > tau_conflict {
                conflicts.insert((g.observer, g.target));
            }
        }
    }
    let resolved = conflicts
        .iter()
        .filter(|(o, t)| {
            trace
                .end
                .final_gaps
                .iter()
                .any(|g| g.observer == *o && g.target == *t && g.magnitude <= tau_resolve)
        })
        .count();
    (conflicts.len(), resolved)
}

/// Percentage of detected conflicts resolved by episode end, pooled over
/// traces. Returns `(100, true)` when nothing was detected.
pub fn conflict_resolution(
    traces: &[EpisodeTrace],
    tau_conflict: f64,
    tau_resolve: f64,
) -> (f64, bool) {
    let (d, r) = traces.iter().fold((0, 0), |(d, r), t| {
        let (a, b) = conflict_counts(t, tau_conflict, tau_resolve);
        (d + a, r + b)
    });
    if d == 0 {
        (100.0, true)
    } else {
        (100.0 * r as f64 / d as f64, false)
    }
}

pub fn info_density(trace: &EpisodeTrace) -> f64 {
    let q = embed_text(&trace.begin.query);
    let v: Vec<f64> = trace
        .steps
        .iter()
        .map(|s| cosine(&embed_text(&s.message), &q).max(0.0))
        .collect();
    100.0 * mean(&v)
}

/// Rounds until every agent knew every hidden digit, or the full episode.
pub fn rounds_used(trace: &EpisodeTrace) -> f64 {
    trace
        .end
        .consensus_round
        .unwrap_or(trace.begin.config.n_round) as f64
}

/// Aggregate metrics over traces. The conflict threshold defaults to the
/// calibrated value stored with the traces' reward settings.
pub fn comm_metrics(traces: &[EpisodeTrace], tau_conflict: Option<f64>) -> CommMetrics {
    let tau = tau_conflict.or_else(|| {
        traces
            .first()
            .and_then(|t| t.begin.reward.shaping.tau_conflict)
    });
    let (conflict_resolution_pct, no_conflicts) = match tau {
        Some(tau) => conflict_resolution(traces, tau, 0.5 * tau),
        None => (100.0, true),
    };
    let per = |f: fn(&EpisodeTrace) -> f64| mean(&traces.iter().map(f).collect::<Vec<_>>());
    CommMetrics {
        avg_rounds: per(rounds_used),
        avg_tokens_k: per(|t| t.total_tokens() as f64) / 1000.0,
        redundancy_pct: per(redundancy),
        conflict_resolution_pct,
        info_density_pct: per(info_density),
        no_conflicts,
    }
}

/// Outcome statistics reported next to the communication metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_r_task: f64,
    pub mean_r_shape: f64,
    pub metrics: CommMetrics,
}

pub fn summarize(traces: &[EpisodeTrace], tau_conflict: Option<f64>) -> EvalSummary {
    let n = traces.len().max(1) as f64;
    EvalSummary {
        episodes: traces.len(),
        success_rate: traces
            .iter()
            .filter(|t| t.end.success == Some(true))
            .count() as f64
            / n,
        mean_return: traces.iter().map(|t| t.end.total_return).sum::<f64>() / n,
        mean_r_task: traces
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.reward.r_task))
            .sum::<f64>()
            / n,
        mean_r_shape: traces
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.reward.r_shape))
            .sum::<f64>()
            / n,
        metrics: comm_metrics(traces, tau_conflict),
    }
}
