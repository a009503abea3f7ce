//! Episode traces and their JSON Lines encoding.
//!
//! A trace file is a sequence of episodes. Each episode is one `begin`
//! record, one `step` record per message and one `end` record; every line
//! carries a `record` tag.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use super::config::EpisodeConfig;
use super::directive::RealizationDirective;
use crate::error::{OscError, Result};
use crate::policy::CommAction;
use crate::rl::reward::{
    probe_events, step_reward, Probe, RewardBreakdown, RewardConfig, ShapingEvent,
};
use crate::text::{AgentId, DialogueAct};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub observer: AgentId,
    pub target: AgentId,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairState {
    pub observer: AgentId,
    pub target: AgentId,
    pub z: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeginRecord {
    pub schema_version: u32,
    pub episode: u64,
    pub config: EpisodeConfig,
    pub reward: RewardConfig,
    pub query: String,
    /// Hidden digits per agent; empty for the open dialogue task.
    pub shares: Vec<u8>,
    pub truth: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub round: usize,
    pub speaker: AgentId,
    pub action: CommAction,
    pub directive: RealizationDirective,
    pub message: String,
    pub act: DialogueAct,
    pub tokens: usize,
    pub value: f64,
    /// The speaker's gaps toward each collaborator before acting.
    pub gaps: Vec<PairGap>,
    /// Every collaborator state after this message, when state logging is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<PairState>>,
    pub probe: Probe,
    pub events: Vec<ShapingEvent>,
    pub reward: RewardBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndRecord {
    pub episode: u64,
    pub contributions: Vec<String>,
    pub r_final: String,
    pub final_value: Option<u8>,
    pub success: Option<bool>,
    pub final_gaps: Vec<PairGap>,
    /// First round after which every agent knew every hidden digit.
    pub consensus_round: Option<usize>,
    pub total_return: f64,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Begin(BeginRecord),
    Step(Box<StepRecord>),
    End(EndRecord),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub begin: BeginRecord,
    pub steps: Vec<StepRecord>,
    pub end: EndRecord,
}

impl EpisodeTrace {
    pub fn agents(&self) -> usize {
        self.begin.config.agents
    }

    pub fn total_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.tokens).sum()
    }

    /// Shaping as it applied to this episode.
    pub fn shaping_active(&self) -> bool {
        self.begin.reward.shaping.enabled && !self.begin.config.ablations.no_shaping
    }
}

/// Recomputes each step's reward from the stored probes, token counts and
/// outcome. Training and replay both go through this function.
pub fn recompute_rewards(
    reward: &RewardConfig,
    shaping_active: bool,
    steps: &[(usize, Probe)],
    outcome: Option<bool>,
) -> Vec<(Vec<ShapingEvent>, RewardBreakdown)> {
    let n = steps.len();
    steps
        .iter()
        .enumerate()
        .map(|(t, (tokens, probe))| {
            let events = if shaping_active {
                probe_events(probe, &reward.shaping)
            } else {
                Vec::new()
            };
            let terminal = if t + 1 == n { outcome } else { None };
            let r = step_reward(terminal, *tokens, &events, reward);
            (events, r)
        })
        .collect()
}

/// Reward totals implied by a stored trace.
pub fn replay_rewards(trace: &EpisodeTrace) -> Vec<(Vec<ShapingEvent>, RewardBreakdown)> {
    let steps: Vec<(usize, Probe)> = trace.steps.iter().map(|s| (s.tokens, s.probe)).collect();
    let outcome = if trace.end.valid {
        trace.end.success
    } else {
        None
    };
    recompute_rewards(&trace.begin.reward, trace.shaping_active(), &steps, outcome)
}

pub fn write_trace<W: Write>(w: &mut W, trace: &EpisodeTrace) -> Result<()> {
    let mut line = |r: &TraceRecord| -> Result<()> {
        let s = serde_json::to_string(r).map_err(|e| OscError::Format(e.to_string()))?;
        writeln!(w, "{s}").map_err(|e| OscError::io("trace", e))
    };
    line(&TraceRecord::Begin(trace.begin.clone()))?;
    for s in &trace.steps {
        line(&TraceRecord::Step(Box::new(s.clone())))?;
    }
    line(&TraceRecord::End(trace.end.clone()))
}

pub fn write_traces(path: &Path, traces: &[EpisodeTrace]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| OscError::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for t in traces {
        write_trace(&mut w, t)?;
    }
    w.flush().map_err(|e| OscError::io(path, e))
}

pub fn parse_traces<R: BufRead>(r: R, origin: &str) -> Result<Vec<EpisodeTrace>> {
    let mut out = Vec::new();
    let mut open: Option<(BeginRecord, Vec<StepRecord>)> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| OscError::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: &str| OscError::Format(format!("{origin}:{}: {m}", i + 1));
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| at(&e.to_string()))?;
        match rec {
            TraceRecord::Begin(b) => {
                if open.is_some() {
                    return Err(at("begin record inside an open episode"));
                }
                if b.schema_version != TRACE_SCHEMA_VERSION {
                    return Err(at(&format!(
                        "unsupported trace schema {}",
                        b.schema_version
                    )));
                }
                open = Some((b, Vec::new()));
            }
            TraceRecord::Step(s) => match open.as_mut() {
                Some((_, steps)) => steps.push(*s),
                None => return Err(at("step record outside an episode")),
            },
            TraceRecord::End(end) => {
                let (begin, steps) = open.take().ok_or_else(|| at("end record without begin"))?;
                out.push(EpisodeTrace { begin, steps, end });
            }
        }
    }
    if open.is_some() {
        return Err(OscError::Format(format!(
            "{origin}: trace ends inside an episode"
        )));
    }
    Ok(out)
}

pub fn read_traces(path: &Path) -> Result<Vec<EpisodeTrace>> {
    let f = std::fs::File::open(path).map_err(|e| OscError::io(path, e))?;
    parse_traces(std::io::BufReader::new(f), &path.display().to_string())
}
