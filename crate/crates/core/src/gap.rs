//! Learned cognitive gap analysis.
//!
//! The agent's own state Φ and its model `z` of a collaborator are projected
//! to 128 dimensions and viewed as 8 facets of 16. Each side cross-attends to
//! the other, the two attended views are concatenated and an MLP maps them to
//! a 64-dimensional gap vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ckm::{CkmState, CKM_DIM};
use crate::error::{OscError, Result};
use crate::nn::attention::AttentionCache;
use crate::nn::layers::{relu, relu_backward};
use crate::nn::tensor::l2_norm;
use crate::nn::{Grads, Linear, MultiHeadAttention, ParamStore, Tensor2};
use crate::text::{AgentId, InternalState, EMBED_DIM};

pub const GAP_DIM: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapVariant {
    #[default]
    Learned,
    /// Projected difference truncated to 64 dimensions.
    Difference,
    /// Distance between projections, broadcast to every coordinate.
    L2,
    /// Feed-forward over concatenated projections, no attention.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapNetConfig {
    pub proj_dim: usize,
    pub facets: usize,
    pub heads: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Default for GapNetConfig {
    fn default() -> Self {
        GapNetConfig {
            proj_dim: 128,
            facets: 8,
            heads: 2,
            hidden: 128,
            out_dim: GAP_DIM,
        }
    }
}

impl GapNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_dim != GAP_DIM {
            return Err(OscError::Config(format!("gap out_dim must be {GAP_DIM}")));
        }
        if self.facets == 0 || self.proj_dim % self.facets != 0 {
            return Err(OscError::Config(
                "gap proj_dim must split evenly into facets".into(),
            ));
        }
        if self.proj_dim < GAP_DIM {
            return Err(OscError::Config(format!(
                "gap proj_dim must be at least {GAP_DIM}"
            )));
        }
        Ok(())
    }

    fn facet_dim(&self) -> usize {
        self.proj_dim / self.facets
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapVector {
    pub observer: AgentId,
    pub target: AgentId,
    pub g: Vec<f64>,
    pub magnitude: f64,
}

#[derive(Clone, Debug)]
pub struct GapNet {
    pub cfg: GapNetConfig,
    pub variant: GapVariant,
    proj_phi: Linear,
    proj_z: Linear,
    attn_phi: MultiHeadAttention,
    attn_z: MultiHeadAttention,
    mlp1: Linear,
    mlp2: Linear,
    /// Final projection to the gap vector.
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct GapCache {
    phi: Vec<f64>,
    z: Vec<f64>,
    pphi: Vec<f64>,
    pz: Vec<f64>,
    attn: Option<(AttentionCache, AttentionCache)>,
    mlp_in: Vec<f64>,
    h1_pre: Tensor2,
    h1: Tensor2,
    h2_pre: Tensor2,
    h2: Tensor2,
    l2: f64,
}

impl GapNet {
    pub fn new<R: Rng>(
        cfg: GapNetConfig,
        variant: GapVariant,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let fd = cfg.facet_dim();
        let mlp_in = match variant {
            GapVariant::Mlp => 2 * cfg.proj_dim,
            _ => 2 * cfg.facets * fd,
        };
        let net = GapNet {
            proj_phi: Linear::new(&mut ps, "gap.proj_phi", EMBED_DIM, cfg.proj_dim, rng),
            proj_z: Linear::new(&mut ps, "gap.proj_z", CKM_DIM, cfg.proj_dim, rng),
            attn_phi: MultiHeadAttention::new(&mut ps, "gap.attn_phi", fd, cfg.heads, rng)?,
            attn_z: MultiHeadAttention::new(&mut ps, "gap.attn_z", fd, cfg.heads, rng)?,
            mlp1: Linear::new(&mut ps, "gap.mlp1", mlp_in, cfg.hidden, rng),
            mlp2: Linear::new(&mut ps, "gap.mlp2", cfg.hidden, cfg.hidden, rng),
            out: Linear::new(&mut ps, "gap.out", cfg.hidden, cfg.out_dim, rng),
            cfg,
            variant,
        };
        Ok((net, ps))
    }

    fn facets(&self, v: &[f64]) -> Tensor2 {
        Tensor2::from_vec(self.cfg.facets, self.cfg.facet_dim(), v.to_vec()).expect("facet view")
    }

    pub fn forward(&self, ps: &ParamStore, phi: &[f64], z: &[f64]) -> Result<(Vec<f64>, GapCache)> {
        if phi.len() != EMBED_DIM || z.len() != CKM_DIM {
            return Err(OscError::Dimension(format!(
                "gap inputs of length {} and {}, expected {EMBED_DIM} and {CKM_DIM}",
                phi.len(),
                z.len()
            )));
        }
        let pphi = self.proj_phi.forward_vec(ps, phi);
        let pz = self.proj_z.forward_vec(ps, z);
        let mut cache = GapCache {
            phi: phi.to_vec(),
            z: z.to_vec(),
            pphi,
            pz,
            attn: None,
            mlp_in: Vec::new(),
            h1_pre: Tensor2::zeros(0, 0),
            h1: Tensor2::zeros(0, 0),
            h2_pre: Tensor2::zeros(0, 0),
            h2: Tensor2::zeros(0, 0),
            l2: 0.0,
        };
        let g = match self.variant {
            GapVariant::Difference => cache.pphi[..GAP_DIM]
                .iter()
                .zip(&cache.pz)
                .map(|(a, b)| a - b)
                .collect(),
            GapVariant::L2 => {
                let diff: Vec<f64> = cache
                    .pphi
                    .iter()
                    .zip(&cache.pz)
                    .map(|(a, b)| a - b)
                    .collect();
                cache.l2 = l2_norm(&diff);
                vec![cache.l2; GAP_DIM]
            }
            GapVariant::Learned | GapVariant::Mlp => {
                cache.mlp_in = if self.variant == GapVariant::Learned {
                    let fp = self.facets(&cache.pphi);
                    let fz = self.facets(&cache.pz);
                    let (a_phi, c1) = self.attn_phi.forward(ps, &fp, &fz)?;
                    let (a_z, c2) = self.attn_z.forward(ps, &fz, &fp)?;
                    cache.attn = Some((c1, c2));
                    let mut v = a_phi.into_vec();
                    v.extend(a_z.into_vec());
                    v
                } else {
                    let mut v = cache.pphi.clone();
                    v.extend_from_slice(&cache.pz);
                    v
                };
                cache.h1_pre = self.mlp1.forward(ps, &Tensor2::row_vector(&cache.mlp_in));
                cache.h1 = relu(&cache.h1_pre);
                cache.h2_pre = self.mlp2.forward(ps, &cache.h1);
                cache.h2 = relu(&cache.h2_pre);
                self.out.forward(ps, &cache.h2).into_vec()
            }
        };
        if !g.iter().all(|v| v.is_finite()) {
            return Err(OscError::Numeric("gap output".into()));
        }
        Ok((g, cache))
    }

    /// Accumulates parameter gradients and returns `(dphi, dz)`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &GapCache,
        dg: &[f64],
        g: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let pd = self.cfg.proj_dim;
        let mut dpphi = vec![0.0; pd];
        let mut dpz = vec![0.0; pd];
        match self.variant {
            GapVariant::Difference => {
                for i in 0..GAP_DIM {
                    dpphi[i] = dg[i];
                    dpz[i] = -dg[i];
                }
            }
            GapVariant::L2 => {
                if c.l2 > 1e-12 {
                    let s: f64 = dg.iter().sum::<f64>() / c.l2;
                    for i in 0..pd {
                        let d = c.pphi[i] - c.pz[i];
                        dpphi[i] = s * d;
                        dpz[i] = -s * d;
                    }
                }
            }
            GapVariant::Learned | GapVariant::Mlp => {
                let dh2 = self.out.backward(ps, &c.h2, &Tensor2::row_vector(dg), g);
                let dh2_pre = relu_backward(&c.h2_pre, &dh2);
                let dh1 = self.mlp2.backward(ps, &c.h1, &dh2_pre, g);
                let dh1_pre = relu_backward(&c.h1_pre, &dh1);
                let din = self
                    .mlp1
                    .backward(ps, &Tensor2::row_vector(&c.mlp_in), &dh1_pre, g)
                    .into_vec();
                if let Some((c1, c2)) = &c.attn {
                    let half = din.len() / 2;
                    let da_phi = self.facets(&din[..half]);
                    let da_z = self.facets(&din[half..]);
                    let (dq1, dkv1) = self.attn_phi.backward(ps, c1, &da_phi, g);
                    let (dq2, dkv2) = self.attn_z.backward(ps, c2, &da_z, g);
                    for i in 0..pd {
                        dpphi[i] = dq1.data()[i] + dkv2.data()[i];
                        dpz[i] = dkv1.data()[i] + dq2.data()[i];
                    }
                } else {
                    dpphi.copy_from_slice(&din[..pd]);
                    dpz.copy_from_slice(&din[pd..]);
                }
            }
        }
        let dphi = self.proj_phi.backward_vec(ps, &c.phi, &dpphi, g);
        let dz = self.proj_z.backward_vec(ps, &c.z, &dpz, g);
        (dphi, dz)
    }
}

/// Gradient of `‖g‖` with respect to `g`, zero at the origin.
pub fn magnitude_grad(g: &[f64]) -> Vec<f64> {
    let n = l2_norm(g);
    if n < 1e-300 {
        return vec![0.0; g.len()];
    }
    g.iter().map(|v| v / n).collect()
}

pub fn compute_gap(
    net: &GapNet,
    ps: &ParamStore,
    phi: &InternalState,
    z: &CkmState,
) -> Result<GapVector> {
    if phi.owner != z.observer {
        return Err(OscError::Contract(format!(
            "state of {} cannot be compared with a model held by {}",
            phi.owner, z.observer
        )));
    }
    let (g, _) = net.forward(ps, &phi.embedding, &z.z)?;
    Ok(GapVector {
        observer: z.observer,
        target: z.target,
        magnitude: l2_norm(&g),
        g,
    })
}

/// One gap per collaborator of `agent`, ascending by target id.
pub fn gap_matrix(
    net: &GapNet,
    ps: &ParamStore,
    agent: AgentId,
    team: &[AgentId],
    states: &[CkmState],
    phi: &InternalState,
) -> Result<Vec<GapVector>> {
    let mut peers: Vec<AgentId> = team.iter().copied().filter(|a| *a != agent).collect();
    peers.sort();
    peers
        .into_iter()
        .map(|t| {
            let s = states
                .iter()
                .find(|s| s.observer == agent && s.target == t)
                .ok_or_else(|| OscError::Lookup(format!("{agent} has no model of {t}")))?;
            compute_gap(net, ps, phi, s)
        })
        .collect()
}
