//! Round-robin episodes.
//!
//! Every round each agent speaks once in ascending id order. Before acting,
//! the speaker refreshes its gaps, assembles the policy state and picks an
//! action; the realized message is appended to the shared history, every
//! other agent absorbs its facts and updates its model of the speaker.
//! After the last round every agent contributes an answer and the
//! aggregate is judged against the task's ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backend::Backend;
use super::config::EpisodeConfig;
use super::directive::{build_directive, DirectiveContext};
use super::models::Models;
use super::task::{
    absorb_facts, aggregate_values, contribution_text, knows_all, parse_contribution, HiddenSumTask,
};
use super::trace::{
    recompute_rewards, BeginRecord, EndRecord, EpisodeTrace, PairGap, PairState, StepRecord,
    TRACE_SCHEMA_VERSION,
};
use crate::ckm::{CkmSource, CkmState, EncodeInput, UpdateInput, CKM_DIM};
use crate::error::{OscError, Result};
use crate::gap::{compute_gap, GapVector};
use crate::nn::tensor::cosine;
use crate::policy::{assemble_state, sample_action, uniform_action, CommAction, SampleMode};
use crate::rl::reward::{request_direction, Probe, RewardConfig};
use crate::text::{
    AgentId, DialogueAct, DialogueHistory, InternalState, PrivatePayload, Query, TaskKind,
    Utterance,
};

/// What the trainer needs to recompute one policy step with gradients.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub phi: Vec<f64>,
    pub query: Vec<f64>,
    pub history: Vec<f64>,
    pub collaborators: Vec<AgentId>,
    /// How each collaborator state in the policy input was produced.
    pub sources: Vec<CkmSource>,
    /// Each collaborator's next dialogue act after this step, if it spoke again.
    pub next_acts: Vec<Option<DialogueAct>>,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub inputs: StepInputs,
    pub action: CommAction,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub trace: EpisodeTrace,
    pub transitions: Vec<Transition>,
}

/// Generators for episode `index`: one stream for the task, one for actions.
pub fn episode_rngs(seed: u64, index: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut task = ChaCha8Rng::seed_from_u64(seed);
    task.set_stream(2 * index);
    let mut act = ChaCha8Rng::seed_from_u64(seed);
    act.set_stream(2 * index + 1);
    (task, act)
}

struct Pending {
    step: usize,
    observer: AgentId,
    target: AgentId,
    direction: Vec<f64>,
}

struct Team {
    k: usize,
    payloads: Vec<PrivatePayload>,
    phis: Vec<InternalState>,
    states: Vec<CkmState>,
    sources: Vec<CkmSource>,
}

impl Team {
    fn pair(&self, observer: AgentId, target: AgentId) -> usize {
        let t = if target.0 > observer.0 {
            target.0 - 1
        } else {
            target.0
        };
        observer.0 * (self.k - 1) + t
    }
}

fn gap_of(models: &Models, team: &Team, observer: AgentId, target: AgentId) -> Result<GapVector> {
    compute_gap(
        &models.gap,
        &models.gap_ps,
        &team.phis[observer.0],
        &team.states[team.pair(observer, target)],
    )
}

pub fn run_episode(
    models: &Models,
    backend: &Backend,
    cfg: &EpisodeConfig,
    reward: &RewardConfig,
    index: u64,
    mode: SampleMode,
) -> Result<EpisodeOutput> {
    cfg.validate()?;
    reward.validate()?;
    if backend.kind() != cfg.backend {
        return Err(OscError::Config(
            "episode backend differs from the configured backend".into(),
        ));
    }
    let abl = cfg.ablations;
    if models.gap.variant != abl.gap_variant() {
        return Err(OscError::Config(format!(
            "gap network is {:?} but the ablations ask for {:?}",
            models.gap.variant,
            abl.gap_variant()
        )));
    }
    let k = cfg.agents;
    let (mut task_rng, mut act_rng) = episode_rngs(cfg.seed, index);
    let (query, task) = match cfg.task {
        TaskKind::HiddenSum => {
            let t = HiddenSumTask::sample(k, &mut task_rng);
            (t.query(), Some(t))
        }
        TaskKind::Dialogue => (Query::new(cfg.query.clone(), TaskKind::Dialogue), None),
    };
    let ids: Vec<AgentId> = (0..k).map(AgentId).collect();
    let payloads: Vec<PrivatePayload> = ids
        .iter()
        .map(|a| match &task {
            Some(t) => t.payload(*a),
            None => PrivatePayload {
                share: None,
                known: Default::default(),
                plan: "answer the query together".into(),
            },
        })
        .collect();
    let phis = ids
        .iter()
        .map(|a| InternalState::derive(*a, payloads[a.0].clone(), &query))
        .collect();
    let mask = abl.profile_mask();
    let window = models.ckm.cfg.history_window;
    let mut history = DialogueHistory::new();

    let learned_ckm = !abl.no_ckm && !abl.update_avg;
    let mut initial = Vec::with_capacity(k);
    for t in &ids {
        initial.push(if learned_ckm {
            let input = EncodeInput::build(*t, &query, &history, window, mask);
            let (z, _) = models.ckm.encode(&models.ckm_ps, &input)?;
            (z, CkmSource::Encode(input))
        } else {
            (vec![0.0; CKM_DIM], CkmSource::Fixed(vec![0.0; CKM_DIM]))
        });
    }
    let mut team = Team {
        k,
        payloads,
        phis,
        states: Vec::with_capacity(k * (k - 1)),
        sources: Vec::with_capacity(k * (k - 1)),
    };
    for o in &ids {
        for t in ids.iter().filter(|t| *t != o) {
            team.states
                .push(CkmState::new(*o, *t, initial[t.0].0.clone())?);
            team.sources.push(initial[t.0].1.clone());
        }
    }

    let begin = BeginRecord {
        schema_version: TRACE_SCHEMA_VERSION,
        episode: index,
        config: cfg.clone(),
        reward: reward.clone(),
        query: query.text.clone(),
        shares: task.as_ref().map(|t| t.shares.clone()).unwrap_or_default(),
        truth: task.as_ref().map(|t| t.truth),
    };

    let action_mask = abl.action_mask();
    let mut avg_sum = vec![vec![0.0; CKM_DIM]; k];
    let mut avg_count = vec![0usize; k];
    let mut open_requests: Vec<Vec<AgentId>> = vec![Vec::new(); k];
    let mut pending: Vec<Pending> = Vec::new();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut transitions: Vec<Transition> = Vec::new();
    let mut consensus_round = None;
    let mut failure: Option<String> = None;

    'rounds: for round in 1..=cfg.n_round {
        for i in 0..k {
            let speaker = AgentId(i);
            let collaborators: Vec<AgentId> =
                ids.iter().copied().filter(|a| *a != speaker).collect();
            let gaps: Vec<GapVector> = collaborators
                .iter()
                .map(|t| gap_of(models, &team, speaker, *t))
                .collect::<Result<_>>()?;
            let state = assemble_state(
                speaker,
                &query,
                &history,
                &team.phis[i],
                &ids,
                &team.states,
                &gaps,
                window,
            )?;
            let (out, cache) = models.policy.forward(&models.policy_ps, &state)?;
            let (value, _) = models
                .critic
                .forward(&models.critic_ps, &state, cache.pooled())?;
            let action = if abl.no_policy {
                uniform_action(&collaborators, &mut act_rng)
            } else {
                sample_action(&out, &collaborators, mode, action_mask, &mut act_rng)
            };

            let mut requests = std::mem::take(&mut open_requests[i]);
            requests.sort();
            requests.dedup();
            let ctx = DirectiveContext {
                query: &query,
                team: &ids,
                history: &history,
                history_window: window,
                open_requests: requests,
                simplified: abl.simplified_prompt,
            };
            let target_state = &team.states[team.pair(speaker, action.target)];
            let directive = build_directive(
                &action,
                &team.phis[i],
                target_state,
                &gaps[action.target_index],
                &ctx,
            );
            let (text, act) = match backend.realize(&directive, &team.phis[i].private_payload) {
                Ok(r) => r,
                Err(e) => {
                    failure = Some(e.to_string());
                    break 'rounds;
                }
            };
            let utt = Utterance::new(speaker, round, text, Some(act));

            // Collaborator updates read the history before the message.
            let update_template = UpdateInput::build(&[], &utt, &query, &history, window, mask);
            history.push(utt.clone())?;

            if task.is_some() {
                for o in ids.iter().filter(|o| **o != speaker) {
                    if absorb_facts(*o, &mut team.payloads[o.0], &utt.text) {
                        team.phis[o.0] =
                            InternalState::derive(*o, team.payloads[o.0].clone(), &query);
                    }
                }
            }

            if abl.update_avg {
                for (s, e) in avg_sum[i].iter_mut().zip(&utt.embedding) {
                    *s += e;
                }
                avg_count[i] += 1;
            }
            for o in ids.iter().copied().filter(|o| *o != speaker) {
                let p = team.pair(o, speaker);
                if abl.no_ckm || (abl.update_static && round > 1) {
                    continue;
                }
                if abl.update_avg {
                    let n = avg_count[i] as f64;
                    let z: Vec<f64> = avg_sum[i].iter().map(|s| s / n).collect();
                    team.states[p].z = z.clone();
                    team.sources[p] = CkmSource::Fixed(z);
                } else {
                    let input = UpdateInput {
                        prev_z: team.states[p].z.clone(),
                        features: update_template.features.clone(),
                    };
                    let (z, _) = models.ckm.update(&models.ckm_ps, &input)?;
                    team.states[p].z = z;
                    team.sources[p] = CkmSource::Update(input);
                }
                team.states[p].last_update_round = round;
            }

            let mut still_pending = Vec::with_capacity(pending.len());
            for pr in pending.drain(..) {
                if pr.target != speaker {
                    still_pending.push(pr);
                    continue;
                }
                let post = gap_of(models, &team, pr.observer, pr.target)?;
                let probe = &mut steps[pr.step].probe;
                probe.post_gap = Some(post.magnitude);
                probe.response_cosine = Some(cosine(&utt.embedding, &pr.direction));
            }
            pending = still_pending;

            let step = steps.len();
            pending.push(Pending {
                step,
                observer: speaker,
                target: action.target,
                direction: request_direction(&team.phis[i].embedding, &query.embedding),
            });
            if action.objective.is_request() {
                if cfg.broadcast {
                    for c in &collaborators {
                        open_requests[c.0].push(speaker);
                    }
                } else {
                    open_requests[action.target.0].push(speaker);
                }
            }

            let states = cfg.log_states.then(|| {
                team.states
                    .iter()
                    .map(|s| PairState {
                        observer: s.observer,
                        target: s.target,
                        z: s.z.clone(),
                    })
                    .collect()
            });
            transitions.push(Transition {
                inputs: StepInputs {
                    phi: state.phi.clone(),
                    query: state.query.clone(),
                    history: state.history.clone(),
                    collaborators: collaborators.clone(),
                    sources: collaborators
                        .iter()
                        .map(|t| team.sources[team.pair(speaker, *t)].clone())
                        .collect(),
                    next_acts: vec![None; collaborators.len()],
                },
                action: action.clone(),
                value,
                reward: 0.0,
                done: false,
            });
            steps.push(StepRecord {
                step,
                round,
                speaker,
                probe: Probe {
                    objective: action.objective,
                    pre_gap: gaps[action.target_index].magnitude,
                    post_gap: None,
                    response_cosine: None,
                },
                action,
                directive,
                message: utt.text.clone(),
                act,
                tokens: utt.token_count(),
                value,
                gaps: gaps
                    .iter()
                    .map(|g| PairGap {
                        observer: g.observer,
                        target: g.target,
                        magnitude: g.magnitude,
                    })
                    .collect(),
                states,
                events: Vec::new(),
                reward: Default::default(),
            });
        }
        if consensus_round.is_none()
            && task.is_some()
            && ids.iter().all(|a| knows_all(*a, &team.payloads[a.0], k))
        {
            consensus_round = Some(round);
        }
    }

    let mut contributions = Vec::new();
    let mut r_final = String::new();
    let mut final_value = None;
    if failure.is_none() {
        match (backend, &task) {
            (Backend::Stub, _) => {
                contributions = team.payloads.iter().map(contribution_text).collect();
                final_value = aggregate_values(&contributions);
                r_final = final_value
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| "abstain".into());
            }
            (Backend::Http(h), _) => {
                let result = (|| -> Result<()> {
                    for a in &ids {
                        let summary: Vec<String> = ids
                            .iter()
                            .filter(|t| *t != a)
                            .map(|t| {
                                gap_of(models, &team, *a, *t)
                                    .map(|g| format!("{t}: gap {:.3}", g.magnitude))
                            })
                            .collect::<Result<_>>()?;
                        let own = team.payloads[a.0].fact_text(*a);
                        contributions.push(h.contribute(
                            *a,
                            &query.text,
                            &own,
                            &summary.join("; "),
                        )?);
                    }
                    r_final = h.aggregate(&query.text, &contributions)?;
                    Ok(())
                })();
                if let Err(e) = result {
                    failure = Some(e.to_string());
                }
                if task.is_some() {
                    final_value = parse_contribution(&r_final);
                }
            }
        }
    }
    let valid = failure.is_none();
    let success = match &task {
        Some(t) if valid => Some(final_value == Some(t.truth)),
        _ => None,
    };

    let mut final_gaps = Vec::with_capacity(k * (k - 1));
    for o in &ids {
        for t in ids.iter().filter(|t| *t != o) {
            let g = gap_of(models, &team, *o, *t)?;
            final_gaps.push(PairGap {
                observer: *o,
                target: *t,
                magnitude: g.magnitude,
            });
        }
    }

    let shaping_active = reward.shaping.enabled && !abl.no_shaping;
    let probes: Vec<_> = steps.iter().map(|s| (s.tokens, s.probe)).collect();
    let rewards = recompute_rewards(reward, shaping_active, &probes, success);
    let mut total_return = 0.0;
    let n = steps.len();
    for (t, ((events, r), (s, tr))) in rewards
        .into_iter()
        .zip(steps.iter_mut().zip(&mut transitions))
        .enumerate()
    {
        total_return += r.total;
        s.events = events;
        s.reward = r;
        tr.reward = r.total;
        tr.done = t + 1 == n;
    }
    for t in 0..n {
        let collaborators = transitions[t].inputs.collaborators.clone();
        for (ci, c) in collaborators.iter().enumerate() {
            transitions[t].inputs.next_acts[ci] = steps[t + 1..]
                .iter()
                .find(|s| s.speaker == *c)
                .map(|s| s.act);
        }
    }

    Ok(EpisodeOutput {
        trace: EpisodeTrace {
            begin,
            steps,
            end: EndRecord {
                episode: index,
                contributions,
                r_final,
                final_value,
                success,
                final_gaps,
                consensus_round,
                total_return,
                valid,
                error: failure,
            },
        },
        transitions,
    })
}
