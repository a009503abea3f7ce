//! Collaborator knowledge models.
//!
//! Each observer keeps one latent vector `z` per collaborator. The vector is
//! initialized by a Transformer encoder over the collaborator's recent
//! utterances, the query and the condensed history, and is then advanced by
//! a gated recurrent update every time that collaborator speaks.

pub mod pretrain;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OscError, Result};
use crate::nn::encoder::{mean_pool_backward, BlockCache};
use crate::nn::gru::GruCache;
use crate::nn::{Encoder, Grads, GruCell, Linear, ParamStore, PositionalEmbedding, Tensor2};
use crate::text::{
    condense_history, profile_dimensions, AgentId, DialogueHistory, ProfileMask, Query, Utterance,
    EMBED_DIM, PROFILE_DIM,
};

pub const CKM_DIM: usize = 128;
/// Utterance embedding followed by its dimension profile.
pub const UTTERANCE_INPUT_DIM: usize = EMBED_DIM + PROFILE_DIM;
/// Message, profile, query and condensed history.
pub const UPDATE_INPUT_DIM: usize = EMBED_DIM + PROFILE_DIM + 2 * EMBED_DIM;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkmNetConfig {
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub history_window: usize,
    pub gru_dim: usize,
}

impl Default for CkmNetConfig {
    fn default() -> Self {
        CkmNetConfig {
            enc_layers: 2,
            enc_heads: 2,
            model_dim: CKM_DIM,
            ff_dim: 256,
            history_window: 5,
            gru_dim: CKM_DIM,
        }
    }
}

impl CkmNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim != CKM_DIM || self.gru_dim != CKM_DIM {
            return Err(OscError::Config(format!(
                "collaborator model and GRU width must be {CKM_DIM}"
            )));
        }
        if self.history_window == 0 || self.history_window + 2 > crate::nn::encoder::MAX_POSITIONS {
            return Err(OscError::Config("history_window out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CkmState {
    pub observer: AgentId,
    pub target: AgentId,
    pub z: Vec<f64>,
    pub last_update_round: usize,
}

impl CkmState {
    pub fn new(observer: AgentId, target: AgentId, z: Vec<f64>) -> Result<Self> {
        if observer == target {
            return Err(OscError::Contract(format!(
                "{observer} cannot model itself"
            )));
        }
        Ok(CkmState {
            observer,
            target,
            z,
            last_update_round: 0,
        })
    }
}

/// Inputs of one encoder evaluation, kept so it can be replayed for gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeInput {
    pub query: Vec<f64>,
    pub history: Vec<f64>,
    /// Target utterances, each `embedding ⊕ profile`.
    pub utterances: Vec<Vec<f64>>,
}

impl EncodeInput {
    pub fn build(
        target: AgentId,
        q: &Query,
        h: &DialogueHistory,
        window: usize,
        mask: ProfileMask,
    ) -> Self {
        EncodeInput {
            query: q.embedding.clone(),
            history: condense_history(h, window),
            utterances: h
                .last_by(target, window)
                .into_iter()
                .map(|u| utterance_features(u, mask))
                .collect(),
        }
    }
}

pub fn utterance_features(u: &Utterance, mask: ProfileMask) -> Vec<f64> {
    let mut v = u.embedding.clone();
    v.extend(profile_dimensions(u).masked(mask));
    v
}

/// Inputs of one recurrent update. `prev_z` is treated as a constant.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateInput {
    pub prev_z: Vec<f64>,
    pub features: Vec<f64>,
}

impl UpdateInput {
    /// `history` is the dialogue before `msg` was appended.
    pub fn build(
        prev_z: &[f64],
        msg: &Utterance,
        q: &Query,
        history: &DialogueHistory,
        window: usize,
        mask: ProfileMask,
    ) -> Self {
        let mut features = utterance_features(msg, mask);
        features.extend_from_slice(&q.embedding);
        features.extend(condense_history(history, window));
        UpdateInput {
            prev_z: prev_z.to_vec(),
            features,
        }
    }
}

/// How a collaborator state was produced, for replaying it with gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum CkmSource {
    Encode(EncodeInput),
    Update(UpdateInput),
    /// No differentiable path (ablations, frozen states).
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct CkmNet {
    pub cfg: CkmNetConfig,
    utt_proj: Linear,
    pos: PositionalEmbedding,
    encoder: Encoder,
    upd_proj: Linear,
    gru: GruCell,
    /// Next-act classifier, used in pre-training and as an auxiliary loss.
    pub act_head: Linear,
    /// Masked-utterance regressor used in pre-training.
    pub mask_head: Linear,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    utt_in: Option<Tensor2>,
    blocks: Vec<BlockCache>,
    rows: usize,
}

#[derive(Clone, Debug)]
pub struct UpdateCache {
    features: Vec<f64>,
    gru: GruCache,
}

pub enum CkmCache {
    Encode(EncodeCache),
    Update(UpdateCache),
    Fixed,
}

impl CkmNet {
    pub fn new<R: Rng>(cfg: CkmNetConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let d = cfg.model_dim;
        let net = CkmNet {
            utt_proj: Linear::new(&mut ps, "ckm.utt_proj", UTTERANCE_INPUT_DIM, d, rng),
            pos: PositionalEmbedding::new(&mut ps, "ckm.pos", d, rng),
            encoder: Encoder::new(
                &mut ps,
                "ckm.enc",
                cfg.enc_layers,
                d,
                cfg.enc_heads,
                cfg.ff_dim,
                rng,
            )?,
            upd_proj: Linear::new(&mut ps, "ckm.upd_proj", UPDATE_INPUT_DIM, cfg.gru_dim, rng),
            gru: GruCell::new(&mut ps, "ckm.gru", cfg.gru_dim, cfg.gru_dim, rng),
            act_head: Linear::new(&mut ps, "ckm.act_head", d, 6, rng),
            mask_head: Linear::new(&mut ps, "ckm.mask_head", d, EMBED_DIM, rng),
            cfg,
        };
        Ok((net, ps))
    }

    /// Encoder pass: `[query; history; projected utterances]` → mean pool.
    pub fn encode(&self, ps: &ParamStore, input: &EncodeInput) -> Result<(Vec<f64>, EncodeCache)> {
        let d = self.cfg.model_dim;
        let n_utt = input.utterances.len();
        let rows = 2 + n_utt;
        let mut seq = Tensor2::zeros(rows, d);
        seq.row_mut(0).copy_from_slice(&input.query);
        seq.row_mut(1).copy_from_slice(&input.history);
        let utt_in = if n_utt > 0 {
            let refs: Vec<&[f64]> = input.utterances.iter().map(Vec::as_slice).collect();
            let t = Tensor2::from_rows(&refs, UTTERANCE_INPUT_DIM)?;
            let proj = self.utt_proj.forward(ps, &t);
            for r in 0..n_utt {
                seq.row_mut(2 + r).copy_from_slice(proj.row(r));
            }
            Some(t)
        } else {
            None
        };
        self.pos.apply(ps, &mut seq)?;
        let (out, blocks) = self.encoder.forward(ps, &seq)?;
        let z = out.mean_rows();
        if !z.iter().all(|v| v.is_finite()) {
            return Err(OscError::Numeric("collaborator encoder output".into()));
        }
        Ok((
            z,
            EncodeCache {
                utt_in,
                blocks,
                rows,
            },
        ))
    }

    pub fn encode_backward(&self, ps: &ParamStore, c: &EncodeCache, dz: &[f64], g: &mut Grads) {
        let dout = mean_pool_backward(c.rows, dz);
        let dseq = self.encoder.backward(ps, &c.blocks, &dout, g);
        self.pos.backward(&dseq, g);
        if let Some(t) = &c.utt_in {
            let n = t.rows();
            let mut dproj = Tensor2::zeros(n, self.cfg.model_dim);
            for r in 0..n {
                dproj.row_mut(r).copy_from_slice(dseq.row(2 + r));
            }
            self.utt_proj.backward_params(t, &dproj, g);
        }
    }

    pub fn update(&self, ps: &ParamStore, input: &UpdateInput) -> Result<(Vec<f64>, UpdateCache)> {
        if input.features.len() != UPDATE_INPUT_DIM {
            return Err(OscError::Dimension(format!(
                "update features have {} entries, expected {UPDATE_INPUT_DIM}",
                input.features.len()
            )));
        }
        let x = self.upd_proj.forward_vec(ps, &input.features);
        let (z, gru) = self.gru.forward(ps, &input.prev_z, &x)?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err(OscError::Numeric("collaborator update output".into()));
        }
        Ok((
            z,
            UpdateCache {
                features: input.features.clone(),
                gru,
            },
        ))
    }

    /// Returns the gradient with respect to the previous state.
    pub fn update_backward(
        &self,
        ps: &ParamStore,
        c: &UpdateCache,
        dz: &[f64],
        g: &mut Grads,
    ) -> Vec<f64> {
        let (dprev, dx) = self.gru.backward(ps, &c.gru, dz, g);
        self.upd_proj.backward_params(
            &Tensor2::row_vector(&c.features),
            &Tensor2::row_vector(&dx),
            g,
        );
        dprev
    }

    /// Replays a recorded source.
    pub fn replay(&self, ps: &ParamStore, src: &CkmSource) -> Result<(Vec<f64>, CkmCache)> {
        match src {
            CkmSource::Encode(i) => self.encode(ps, i).map(|(z, c)| (z, CkmCache::Encode(c))),
            CkmSource::Update(i) => self.update(ps, i).map(|(z, c)| (z, CkmCache::Update(c))),
            CkmSource::Fixed(z) => Ok((z.clone(), CkmCache::Fixed)),
        }
    }

    pub fn replay_backward(&self, ps: &ParamStore, cache: &CkmCache, dz: &[f64], g: &mut Grads) {
        match cache {
            CkmCache::Encode(c) => self.encode_backward(ps, c, dz, g),
            CkmCache::Update(c) => {
                self.update_backward(ps, c, dz, g);
            }
            CkmCache::Fixed => {}
        }
    }

    pub fn act_logits(&self, ps: &ParamStore, z: &[f64]) -> Vec<f64> {
        self.act_head.forward_vec(ps, z)
    }
}

/// Initial model of `target` held by an observer.
pub fn ckm_encode(
    net: &CkmNet,
    ps: &ParamStore,
    team: &[AgentId],
    target: AgentId,
    q: &Query,
    h: &DialogueHistory,
    mask: ProfileMask,
) -> Result<Vec<f64>> {
    if !team.contains(&target) {
        return Err(OscError::Lookup(format!("{target} is not on the team")));
    }
    let input = EncodeInput::build(target, q, h, net.cfg.history_window, mask);
    Ok(net.encode(ps, &input)?.0)
}

/// Advances an observer's model of the message author. `h` is the history
/// before the message was appended.
pub fn ckm_update(
    net: &CkmNet,
    ps: &ParamStore,
    state: &CkmState,
    msg: &Utterance,
    q: &Query,
    h: &DialogueHistory,
    mask: ProfileMask,
) -> Result<CkmState> {
    if msg.speaker != state.target {
        return Err(OscError::Contract(format!(
            "{} cannot update its model of {} from a message by {}",
            state.observer, state.target, msg.speaker
        )));
    }
    let input = UpdateInput::build(&state.z, msg, q, h, net.cfg.history_window, mask);
    let (z, _) = net.update(ps, &input)?;
    Ok(CkmState {
        observer: state.observer,
        target: state.target,
        z,
        last_update_round: msg.round,
    })
}
