//! Policy trunk, action heads and critic.
//!
//! The assembled state is a sequence `[Φ, Q, H, z_1, G_1, …]`. Each row is
//! projected by a per-type linear map, offset by a type embedding and a
//! position embedding, and passed through a Transformer encoder. The mean
//! of the encoder outputs feeds the objective and style heads; the target
//! head scores each collaborator from its own two output rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionMask, CommAction, PolicyState, OBJECTIVE_COUNT};
use crate::ckm::CKM_DIM;
use crate::error::{OscError, Result};
use crate::gap::GAP_DIM;
use crate::nn::dist::{Beta, Categorical};
use crate::nn::encoder::{mean_pool_backward, BlockCache};
use crate::nn::layers::{sigmoid, softplus};
use crate::nn::{Encoder, Grads, Linear, ParamId, ParamStore, PositionalEmbedding, Tensor2};
use crate::text::EMBED_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    /// Value head on the policy trunk's pooled output.
    Shared,
    /// Independent trunk with the same shape.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyNetConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub critic: CriticMode,
    /// Stops value-loss gradients at the shared trunk.
    pub detach_critic: bool,
}

impl Default for PolicyNetConfig {
    fn default() -> Self {
        PolicyNetConfig {
            layers: 4,
            heads: 4,
            model_dim: 256,
            ff_dim: 1024,
            critic: CriticMode::Shared,
            detach_critic: false,
        }
    }
}

const TYPE_PHI: usize = 0;
const TYPE_QUERY: usize = 1;
const TYPE_HIST: usize = 2;
const TYPE_CKM: usize = 3;
const TYPE_GAP: usize = 4;

#[derive(Clone, Debug)]
pub struct StateEncoder {
    proj_phi: Linear,
    proj_query: Linear,
    proj_hist: Linear,
    proj_ckm: Linear,
    proj_gap: Linear,
    type_emb: ParamId,
    pos: PositionalEmbedding,
    encoder: Encoder,
    dim: usize,
}

#[derive(Clone, Debug)]
pub struct TrunkCache {
    phi: Tensor2,
    query: Tensor2,
    hist: Tensor2,
    z_in: Tensor2,
    g_in: Tensor2,
    blocks: Vec<BlockCache>,
    rows: usize,
}

/// Gradients with respect to the differentiable state inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateGrads {
    pub dz: Vec<Vec<f64>>,
    pub dg: Vec<Vec<f64>>,
}

impl StateGrads {
    pub fn add(&mut self, other: &StateGrads) {
        if self.dz.is_empty() {
            *self = other.clone();
            return;
        }
        for (a, b) in self.dz.iter_mut().zip(&other.dz) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.dg.iter_mut().zip(&other.dg) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

impl StateEncoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &PolicyNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(StateEncoder {
            proj_phi: Linear::new(ps, &format!("{name}.proj_phi"), EMBED_DIM, d, rng),
            proj_query: Linear::new(ps, &format!("{name}.proj_query"), EMBED_DIM, d, rng),
            proj_hist: Linear::new(ps, &format!("{name}.proj_hist"), EMBED_DIM, d, rng),
            proj_ckm: Linear::new(ps, &format!("{name}.proj_ckm"), CKM_DIM, d, rng),
            proj_gap: Linear::new(ps, &format!("{name}.proj_gap"), GAP_DIM, d, rng),
            type_emb: ps.add_xavier(&format!("{name}.type_emb"), 5, d, rng),
            pos: PositionalEmbedding::new(ps, &format!("{name}.pos"), d, rng),
            encoder: Encoder::new(
                ps,
                &format!("{name}.enc"),
                cfg.layers,
                d,
                cfg.heads,
                cfg.ff_dim,
                rng,
            )?,
            dim: d,
        })
    }

    pub fn forward(&self, ps: &ParamStore, st: &PolicyState) -> Result<(Tensor2, TrunkCache)> {
        let n = st.collaborators.len();
        if n == 0 || st.ckm_block.len() != n || st.gap_block.len() != n {
            return Err(OscError::Precondition(format!(
                "policy state needs one model and one gap per collaborator, got {n}, {}, {}",
                st.ckm_block.len(),
                st.gap_block.len()
            )));
        }
        let rows = st.seq_len();
        let cache = TrunkCache {
            phi: Tensor2::row_vector(&st.phi),
            query: Tensor2::row_vector(&st.query),
            hist: Tensor2::row_vector(&st.history),
            z_in: Tensor2::from_rows(
                &st.ckm_block.iter().map(Vec::as_slice).collect::<Vec<_>>(),
                CKM_DIM,
            )?,
            g_in: Tensor2::from_rows(
                &st.gap_block.iter().map(Vec::as_slice).collect::<Vec<_>>(),
                GAP_DIM,
            )?,
            blocks: Vec::new(),
            rows,
        };
        let mut seq = Tensor2::zeros(rows, self.dim);
        seq.row_mut(0)
            .copy_from_slice(self.proj_phi.forward(ps, &cache.phi).row(0));
        seq.row_mut(1)
            .copy_from_slice(self.proj_query.forward(ps, &cache.query).row(0));
        seq.row_mut(2)
            .copy_from_slice(self.proj_hist.forward(ps, &cache.hist).row(0));
        let pz = self.proj_ckm.forward(ps, &cache.z_in);
        let pg = self.proj_gap.forward(ps, &cache.g_in);
        for l in 0..n {
            seq.row_mut(3 + 2 * l).copy_from_slice(pz.row(l));
            seq.row_mut(4 + 2 * l).copy_from_slice(pg.row(l));
        }
        let types = ps.value(self.type_emb);
        for r in 0..rows {
            let ty = row_type(r);
            for (v, t) in seq.row_mut(r).iter_mut().zip(types.row(ty)) {
                *v += t;
            }
        }
        self.pos.apply(ps, &mut seq)?;
        let (out, blocks) = self.encoder.forward(ps, &seq)?;
        Ok((out, TrunkCache { blocks, ..cache }))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &TrunkCache,
        dout: &Tensor2,
        g: &mut Grads,
    ) -> StateGrads {
        let dseq = self.encoder.backward(ps, &c.blocks, dout, g);
        self.pos.backward(&dseq, g);
        {
            let gt = g.get_mut(self.type_emb);
            for r in 0..c.rows {
                for (a, d) in gt.row_mut(row_type(r)).iter_mut().zip(dseq.row(r)) {
                    *a += d;
                }
            }
        }
        let row = |r: usize| Tensor2::row_vector(dseq.row(r));
        self.proj_phi.backward_params(&c.phi, &row(0), g);
        self.proj_query.backward_params(&c.query, &row(1), g);
        self.proj_hist.backward_params(&c.hist, &row(2), g);
        let n = c.z_in.rows();
        let mut dpz = Tensor2::zeros(n, self.dim);
        let mut dpg = Tensor2::zeros(n, self.dim);
        for l in 0..n {
            dpz.row_mut(l).copy_from_slice(dseq.row(3 + 2 * l));
            dpg.row_mut(l).copy_from_slice(dseq.row(4 + 2 * l));
        }
        let dz = self.proj_ckm.backward(ps, &c.z_in, &dpz, g);
        let dgap = self.proj_gap.backward(ps, &c.g_in, &dpg, g);
        StateGrads {
            dz: (0..n).map(|l| dz.row(l).to_vec()).collect(),
            dg: (0..n).map(|l| dgap.row(l).to_vec()).collect(),
        }
    }
}

fn row_type(r: usize) -> usize {
    match r {
        0 => TYPE_PHI,
        1 => TYPE_QUERY,
        2 => TYPE_HIST,
        r if r % 2 == 1 => TYPE_CKM,
        _ => TYPE_GAP,
    }
}

/// Action distributions for one state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub objective: Categorical,
    pub target: Categorical,
    /// Pre-activation style parameters `[α_detail, β_detail, α_assert, β_assert]`.
    pub style_raw: [f64; 4],
    pub detail: Beta,
    pub assertiveness: Beta,
    pub value: f64,
}

/// Loss gradients with respect to the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub dobjective: Vec<f64>,
    pub dtarget: Vec<f64>,
    pub dstyle_raw: [f64; 4],
}

impl PolicyOutput {
    pub fn from_parts(
        objective: Vec<f64>,
        target: Vec<f64>,
        style_raw: [f64; 4],
        value: f64,
    ) -> Self {
        let p = |u: f64| softplus(u) + 1.0;
        PolicyOutput {
            objective: Categorical::new(objective),
            target: Categorical::new(target),
            detail: Beta::new(p(style_raw[0]), p(style_raw[1])),
            assertiveness: Beta::new(p(style_raw[2]), p(style_raw[3])),
            style_raw,
            value,
        }
    }

    pub fn log_prob(&self, a: &CommAction, mask: ActionMask) -> f64 {
        let mut lp = self.target.log_prob(a.target_index);
        if mask.objective {
            lp += self.objective.log_prob(a.objective.index());
        }
        if mask.style {
            lp += self.detail.log_density(a.style.detail)
                + self.assertiveness.log_density(a.style.assertiveness);
        }
        lp
    }

    pub fn entropy(&self, mask: ActionMask) -> f64 {
        let mut h = self.target.entropy();
        if mask.objective {
            h += self.objective.entropy();
        }
        if mask.style {
            h += self.detail.entropy() + self.assertiveness.entropy();
        }
        h
    }

    /// Gradient of `c_logp · log π(a) + c_ent · H` with respect to the heads.
    pub fn head_grads(
        &self,
        a: &CommAction,
        mask: ActionMask,
        c_logp: f64,
        c_ent: f64,
    ) -> HeadGrads {
        let combine = |lp: Vec<f64>, h: Vec<f64>| -> Vec<f64> {
            lp.iter()
                .zip(&h)
                .map(|(x, y)| c_logp * x + c_ent * y)
                .collect()
        };
        let dtarget = combine(
            self.target.log_prob_grad(a.target_index),
            self.target.entropy_grad(),
        );
        let dobjective = if mask.objective {
            combine(
                self.objective.log_prob_grad(a.objective.index()),
                self.objective.entropy_grad(),
            )
        } else {
            vec![0.0; OBJECTIVE_COUNT]
        };
        let mut dstyle_raw = [0.0; 4];
        if mask.style {
            for (k, (b, x)) in [
                (&self.detail, a.style.detail),
                (&self.assertiveness, a.style.assertiveness),
            ]
            .into_iter()
            .enumerate()
            {
                let (la, lb) = b.log_density_grad(x);
                let (ha, hb) = b.entropy_grad();
                dstyle_raw[2 * k] = (c_logp * la + c_ent * ha) * sigmoid(self.style_raw[2 * k]);
                dstyle_raw[2 * k + 1] =
                    (c_logp * lb + c_ent * hb) * sigmoid(self.style_raw[2 * k + 1]);
            }
        }
        HeadGrads {
            dobjective,
            dtarget,
            dstyle_raw,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub cfg: PolicyNetConfig,
    trunk: StateEncoder,
    pub objective_head: Linear,
    pub target_head: Linear,
    pub style_head: Linear,
}

#[derive(Clone, Debug)]
pub struct PolicyCache {
    trunk: TrunkCache,
    pooled: Vec<f64>,
    target_in: Tensor2,
    out_rows: usize,
}

impl PolicyCache {
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }
}

impl PolicyNet {
    pub fn new<R: Rng>(cfg: PolicyNetConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut ps = ParamStore::new();
        let d = cfg.model_dim;
        let net = PolicyNet {
            trunk: StateEncoder::new(&mut ps, "policy.trunk", &cfg, rng)?,
            objective_head: Linear::new(&mut ps, "policy.objective", d, OBJECTIVE_COUNT, rng),
            target_head: Linear::new(&mut ps, "policy.target", d, 1, rng),
            style_head: Linear::new(&mut ps, "policy.style", d, 4, rng),
            cfg,
        };
        Ok((net, ps))
    }

    /// Action distributions; `value` is left at zero for the critic to fill.
    pub fn forward(
        &self,
        ps: &ParamStore,
        st: &PolicyState,
    ) -> Result<(PolicyOutput, PolicyCache)> {
        let (out, trunk) = self.trunk.forward(ps, st)?;
        let pooled = out.mean_rows();
        let n = st.collaborators.len();
        let mut target_in = Tensor2::zeros(n, self.cfg.model_dim);
        for l in 0..n {
            let row = target_in.row_mut(l);
            for (j, v) in row.iter_mut().enumerate() {
                *v = pooled[j] + out.get(3 + 2 * l, j) + out.get(4 + 2 * l, j);
            }
        }
        let obj = self.objective_head.forward_vec(ps, &pooled);
        let tgt = self.target_head.forward(ps, &target_in).into_vec();
        let sr = self.style_head.forward_vec(ps, &pooled);
        let output = PolicyOutput::from_parts(obj, tgt, [sr[0], sr[1], sr[2], sr[3]], 0.0);
        let finite = output
            .objective
            .logits
            .iter()
            .chain(&output.target.logits)
            .all(|v| v.is_finite())
            && output.style_raw.iter().all(|v| v.is_finite());
        if !finite {
            return Err(OscError::Numeric("policy heads".into()));
        }
        Ok((
            output,
            PolicyCache {
                out_rows: out.rows(),
                trunk,
                pooled,
                target_in,
            },
        ))
    }

    /// Backpropagates head gradients plus an optional extra gradient on the
    /// pooled vector (from a shared critic).
    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &PolicyCache,
        hg: &HeadGrads,
        dpooled_extra: Option<&[f64]>,
        g: &mut Grads,
    ) -> StateGrads {
        let mut dpooled = self
            .objective_head
            .backward_vec(ps, &c.pooled, &hg.dobjective, g);
        let ds = self
            .style_head
            .backward_vec(ps, &c.pooled, &hg.dstyle_raw, g);
        let dt = self.target_head.backward(
            ps,
            &c.target_in,
            &Tensor2::from_vec(hg.dtarget.len(), 1, hg.dtarget.clone()).expect("column"),
            g,
        );
        for j in 0..dpooled.len() {
            dpooled[j] += ds[j];
            for l in 0..dt.rows() {
                dpooled[j] += dt.get(l, j);
            }
            if let Some(extra) = dpooled_extra {
                dpooled[j] += extra[j];
            }
        }
        let mut dout = mean_pool_backward(c.out_rows, &dpooled);
        for l in 0..dt.rows() {
            for j in 0..dt.cols() {
                let d = dt.get(l, j);
                dout.set(3 + 2 * l, j, dout.get(3 + 2 * l, j) + d);
                dout.set(4 + 2 * l, j, dout.get(4 + 2 * l, j) + d);
            }
        }
        self.trunk.backward(ps, &c.trunk, &dout, g)
    }
}

#[derive(Clone, Debug)]
pub struct CriticNet {
    pub mode: CriticMode,
    pub detach: bool,
    trunk: Option<StateEncoder>,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub struct CriticCache {
    input: Vec<f64>,
    trunk: Option<TrunkCache>,
    rows: usize,
}

impl CriticNet {
    pub fn new<R: Rng>(cfg: &PolicyNetConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut ps = ParamStore::new();
        let trunk = match cfg.critic {
            CriticMode::Shared => None,
            CriticMode::Separate => Some(StateEncoder::new(&mut ps, "critic.trunk", cfg, rng)?),
        };
        let head = Linear::new(&mut ps, "critic.value", cfg.model_dim, 1, rng);
        Ok((
            CriticNet {
                mode: cfg.critic,
                detach: cfg.detach_critic,
                trunk,
                head,
            },
            ps,
        ))
    }

    /// `policy_pooled` is the policy trunk output, used in shared mode.
    pub fn forward(
        &self,
        ps: &ParamStore,
        st: &PolicyState,
        policy_pooled: &[f64],
    ) -> Result<(f64, CriticCache)> {
        let (input, trunk, rows) = match &self.trunk {
            None => (policy_pooled.to_vec(), None, 0),
            Some(t) => {
                let (out, c) = t.forward(ps, st)?;
                (out.mean_rows(), Some(c), out.rows())
            }
        };
        let v = self.head.forward_vec(ps, &input)[0];
        if !v.is_finite() {
            return Err(OscError::Numeric("critic value".into()));
        }
        Ok((v, CriticCache { input, trunk, rows }))
    }

    /// Returns the gradient for the shared policy trunk (if any) and the
    /// state gradients from a separate trunk (if any).
    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &CriticCache,
        dv: f64,
        g: &mut Grads,
    ) -> (Option<Vec<f64>>, Option<StateGrads>) {
        let din = self.head.backward_vec(ps, &c.input, &[dv], g);
        match (&self.trunk, &c.trunk) {
            (Some(t), Some(tc)) => {
                let dout = mean_pool_backward(c.rows, &din);
                (None, Some(t.backward(ps, tc, &dout, g)))
            }
            _ if self.detach => (None, None),
            _ => (Some(din), None),
        }
    }
}
