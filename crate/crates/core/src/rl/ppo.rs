//! Clipped-surrogate PPO with gradients through the collaborator models.
//!
//! Rollouts store the inputs of every policy step. During an update each
//! step is recomputed: collaborator states are replayed from their recorded
//! sources, gaps are recomputed from Φ and those states, and the policy and
//! critic run on the rebuilt state. The loss gradient then flows back
//! through the policy into the gap network and the collaborator models.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Models, StepInputs};
use crate::error::{OscError, Result};
use crate::nn::dist::Categorical;
use crate::nn::params::AdamConfig;
use crate::nn::Grads;
use crate::policy::{ActionMask, CommAction, PolicyState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub batch_steps: usize,
    pub minibatch: usize,
    pub epochs_per_update: usize,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_ckm: f64,
    pub lr_gap: f64,
    /// Weight of the next-act prediction loss on collaborator states.
    pub aux_weight: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            entropy_coef: 0.01,
            value_coef: 0.5,
            batch_steps: 2048,
            minibatch: 256,
            epochs_per_update: 10,
            lr_policy: 1e-4,
            lr_critic: 3e-4,
            lr_ckm: 5e-5,
            lr_gap: 5e-5,
            aux_weight: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("clip_eps", self.clip_eps),
            ("gae_lambda", self.gae_lambda),
            ("lr_policy", self.lr_policy),
            ("lr_critic", self.lr_critic),
            ("lr_ckm", self.lr_ckm),
            ("lr_gap", self.lr_gap),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(OscError::Config(format!("ppo.{name} must be positive")));
            }
        }
        if self.clip_eps >= 1.0 || self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return Err(OscError::Config(
                "ppo clip_eps must be below 1, gamma and gae_lambda at most 1".into(),
            ));
        }
        if self.entropy_coef < 0.0 || self.value_coef < 0.0 || self.aux_weight < 0.0 {
            return Err(OscError::Config(
                "ppo loss weights must be non-negative".into(),
            ));
        }
        if self.batch_steps == 0 || self.minibatch == 0 || self.epochs_per_update == 0 {
            return Err(OscError::Config(
                "ppo batch_steps, minibatch and epochs_per_update must be positive".into(),
            ));
        }
        if self.minibatch > self.batch_steps {
            return Err(OscError::Config("ppo minibatch exceeds batch_steps".into()));
        }
        Ok(())
    }
}

/// One policy step ready for optimization.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: StepInputs,
    pub action: CommAction,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

/// Which components receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub policy: bool,
    pub critic: bool,
    pub ckm: bool,
    pub gap: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        policy: true,
        critic: true,
        ckm: true,
        gap: true,
    };
}

/// Per-sample clipped surrogate `-min(r·A, clip(r)·A)` and its derivative
/// with respect to `log π`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (-unclipped, -advantage * ratio)
    } else {
        (-clipped, 0.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub aux_loss: f64,
    pub clip_fraction: f64,
}

pub struct ModelGrads {
    pub ckm: Grads,
    pub gap: Grads,
    pub policy: Grads,
    pub critic: Grads,
}

impl ModelGrads {
    pub fn new(m: &Models) -> Self {
        ModelGrads {
            ckm: m.ckm_ps.zero_grads(),
            gap: m.gap_ps.zero_grads(),
            policy: m.policy_ps.zero_grads(),
            critic: m.critic_ps.zero_grads(),
        }
    }
}

/// Mean loss over `batch`; gradients of that mean are added to `grads`.
pub fn batch_loss(
    m: &Models,
    batch: &[&Sample],
    cfg: &PpoConfig,
    mask: ActionMask,
    train: Trainable,
    mut grads: Option<&mut ModelGrads>,
) -> Result<LossStats> {
    let b = batch.len() as f64;
    let mut st = LossStats::default();
    let through_state = train.ckm || train.gap;
    for s in batch {
        let inp = &s.inputs;
        let mut ckm_caches = Vec::with_capacity(inp.sources.len());
        let mut zs = Vec::with_capacity(inp.sources.len());
        for src in &inp.sources {
            let (z, c) = m.ckm.replay(&m.ckm_ps, src)?;
            zs.push(z);
            ckm_caches.push(c);
        }
        let mut gap_caches = Vec::with_capacity(zs.len());
        let mut gs = Vec::with_capacity(zs.len());
        for z in &zs {
            let (g, c) = m.gap.forward(&m.gap_ps, &inp.phi, z)?;
            gs.push(g);
            gap_caches.push(c);
        }
        let state = PolicyState {
            phi: inp.phi.clone(),
            query: inp.query.clone(),
            history: inp.history.clone(),
            collaborators: inp.collaborators.clone(),
            ckm_block: zs.clone(),
            gap_block: gs,
        };
        let (out, pcache) = m.policy.forward(&m.policy_ps, &state)?;
        let (v, ccache) = m.critic.forward(&m.critic_ps, &state, pcache.pooled())?;
        let logp = out.log_prob(&s.action, mask);
        let ent = out.entropy(mask);
        let ratio = (logp - s.old_log_prob).exp();
        let (lp, dlogp) = clipped_surrogate(ratio, s.advantage, cfg.clip_eps);
        let vl = (v - s.ret) * (v - s.ret);
        if (ratio - 1.0).abs() > cfg.clip_eps {
            st.clip_fraction += 1.0 / b;
        }

        let mut aux = 0.0;
        let mut aux_terms = Vec::new();
        if train.ckm && cfg.aux_weight > 0.0 {
            for (l, next) in inp.next_acts.iter().enumerate() {
                if let Some(act) = next {
                    let logits = m.ckm.act_logits(&m.ckm_ps, &zs[l]);
                    let c = Categorical::new(logits);
                    aux -= c.log_prob(act.index());
                    aux_terms.push((l, c, act.index()));
                }
            }
        }
        let loss = lp + cfg.value_coef * vl - cfg.entropy_coef * ent + cfg.aux_weight * aux;
        if !loss.is_finite() {
            return Err(OscError::Numeric(format!("ppo loss ({loss})")));
        }
        st.total += loss / b;
        st.policy_loss += lp / b;
        st.value_loss += vl / b;
        st.entropy += ent / b;
        st.aux_loss += aux / b;

        let Some(g) = grads.as_deref_mut() else {
            continue;
        };
        let hg = out.head_grads(&s.action, mask, dlogp / b, -cfg.entropy_coef / b);
        let dv = 2.0 * cfg.value_coef * (v - s.ret) / b;
        let (dpooled, critic_state) = m.critic.backward(&m.critic_ps, &ccache, dv, &mut g.critic);
        let mut sg = m.policy.backward(
            &m.policy_ps,
            &pcache,
            &hg,
            dpooled.as_deref(),
            &mut g.policy,
        );
        if let Some(cs) = critic_state {
            sg.add(&cs);
        }
        if !through_state {
            continue;
        }
        let mut dzs = sg.dz;
        for (l, gc) in gap_caches.iter().enumerate() {
            let (_, dz) = m.gap.backward(&m.gap_ps, gc, &sg.dg[l], &mut g.gap);
            for (a, d) in dzs[l].iter_mut().zip(dz) {
                *a += d;
            }
        }
        for (l, c, idx) in &aux_terms {
            let dlogits: Vec<f64> = c
                .log_prob_grad(*idx)
                .iter()
                .map(|x| -cfg.aux_weight * x / b)
                .collect();
            let dz = m
                .ckm
                .act_head
                .backward_vec(&m.ckm_ps, &zs[*l], &dlogits, &mut g.ckm);
            for (a, d) in dzs[*l].iter_mut().zip(dz) {
                *a += d;
            }
        }
        if train.ckm {
            for (l, cc) in ckm_caches.iter().enumerate() {
                m.ckm.replay_backward(&m.ckm_ps, cc, &dzs[l], &mut g.ckm);
            }
        }
    }
    Ok(st)
}

/// Applies one optimizer step per trainable component.
pub fn apply_grads(
    m: &mut Models,
    g: &ModelGrads,
    cfg: &PpoConfig,
    train: Trainable,
) -> Result<()> {
    let steps: [(bool, &mut crate::nn::ParamStore, &Grads, f64); 4] = [
        (train.policy, &mut m.policy_ps, &g.policy, cfg.lr_policy),
        (train.critic, &mut m.critic_ps, &g.critic, cfg.lr_critic),
        (train.ckm, &mut m.ckm_ps, &g.ckm, cfg.lr_ckm),
        (train.gap, &mut m.gap_ps, &g.gap, cfg.lr_gap),
    ];
    for (on, ps, grads, lr) in steps {
        if on {
            ps.accumulate(grads);
            ps.adam_step(&AdamConfig::with_lr(lr))?;
        }
    }
    Ok(())
}

/// Normalizes advantages over the whole buffer, then runs
/// `epochs_per_update` passes of shuffled minibatches. Returns the mean
/// statistics of the last epoch.
pub fn ppo_update<R: Rng>(
    m: &mut Models,
    samples: &mut [Sample],
    cfg: &PpoConfig,
    mask: ActionMask,
    train: Trainable,
    rng: &mut R,
) -> Result<LossStats> {
    if samples.is_empty() || samples.len() < cfg.minibatch {
        return Err(OscError::Precondition(format!(
            "ppo buffer holds {} steps, less than one minibatch of {}",
            samples.len(),
            cfg.minibatch
        )));
    }
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    super::gae::normalize_advantages(&mut adv);
    for (s, a) in samples.iter_mut().zip(adv) {
        s.advantage = a;
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut last = LossStats::default();
    for epoch in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        let mut acc = LossStats::default();
        let mut batches = 0.0;
        for (mb, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut g = ModelGrads::new(m);
            let st = batch_loss(m, &batch, cfg, mask, train, Some(&mut g))
                .map_err(|e| OscError::Numeric(format!("epoch {epoch}, minibatch {mb}: {e}")))?;
            apply_grads(m, &g, cfg, train)
                .map_err(|e| OscError::Numeric(format!("epoch {epoch}, minibatch {mb}: {e}")))?;
            acc.total += st.total;
            acc.policy_loss += st.policy_loss;
            acc.value_loss += st.value_loss;
            acc.entropy += st.entropy;
            acc.aux_loss += st.aux_loss;
            acc.clip_fraction += st.clip_fraction;
            batches += 1.0;
        }
        last = LossStats {
            total: acc.total / batches,
            policy_loss: acc.policy_loss / batches,
            value_loss: acc.value_loss / batches,
            entropy: acc.entropy / batches,
            aux_loss: acc.aux_loss / batches,
            clip_fraction: acc.clip_fraction / batches,
        };
    }
    Ok(last)
}
