//! Post-norm Transformer encoder blocks.

use rand::Rng;

use super::attention::{AttentionCache, MultiHeadAttention};
use super::layers::{relu, relu_backward, LayerNorm, LayerNormCache, Linear};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor2;
use crate::error::{OscError, Result};

/// Longest sequence a learned positional table covers.
pub const MAX_POSITIONS: usize = 64;

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    attn: AttentionCache,
    ln1: LayerNormCache,
    h1: Tensor2,
    ff_pre: Tensor2,
    ff_act: Tensor2,
    ln2: LayerNormCache,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            ff1: Linear::new(ps, &format!("{name}.ff1"), dim, ff_dim, rng),
            ff2: Linear::new(ps, &format!("{name}.ff2"), ff_dim, dim, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
        })
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2) -> Result<(Tensor2, BlockCache)> {
        let (a, attn) = self.attn.forward(ps, x, x)?;
        let mut r1 = x.clone();
        r1.add_assign(&a);
        let (h1, ln1) = self.ln1.forward(ps, &r1);
        let ff_pre = self.ff1.forward(ps, &h1);
        let ff_act = relu(&ff_pre);
        let f = self.ff2.forward(ps, &ff_act);
        let mut r2 = h1.clone();
        r2.add_assign(&f);
        let (y, ln2) = self.ln2.forward(ps, &r2);
        Ok((
            y,
            BlockCache {
                attn,
                ln1,
                h1,
                ff_pre,
                ff_act,
                ln2,
            },
        ))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &BlockCache,
        dy: &Tensor2,
        g: &mut Grads,
    ) -> Tensor2 {
        let dr2 = self.ln2.backward(ps, &c.ln2, dy, g);
        let dact = self.ff2.backward(ps, &c.ff_act, &dr2, g);
        let dpre = relu_backward(&c.ff_pre, &dact);
        let mut dh1 = self.ff1.backward(ps, &c.h1, &dpre, g);
        dh1.add_assign(&dr2);
        let dr1 = self.ln1.backward(ps, &c.ln1, &dh1, g);
        let (dq, dkv) = self.attn.backward(ps, &c.attn, &dr1, g);
        let mut dx = dr1;
        dx.add_assign(&dq);
        dx.add_assign(&dkv);
        dx
    }
}

/// A stack of encoder blocks; zero blocks is the identity.
#[derive(Clone, Debug)]
pub struct Encoder {
    blocks: Vec<EncoderBlock>,
    pub dim: usize,
}

impl Encoder {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|l| EncoderBlock::new(ps, &format!("{name}.{l}"), dim, heads, ff_dim, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { blocks, dim })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward(&self, ps: &ParamStore, seq: &Tensor2) -> Result<(Tensor2, Vec<BlockCache>)> {
        if seq.rows() == 0 {
            return Err(OscError::Precondition(
                "encoder input sequence is empty".into(),
            ));
        }
        let mut x = seq.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(ps, &x)?;
            caches.push(c);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        caches: &[BlockCache],
        dy: &Tensor2,
        g: &mut Grads,
    ) -> Tensor2 {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter().zip(caches).rev() {
            d = b.backward(ps, c, &d, g);
        }
        d
    }
}

/// Learned per-position offsets added to an input sequence.
#[derive(Clone, Debug)]
pub struct PositionalEmbedding {
    pub table: ParamId,
}

impl PositionalEmbedding {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        PositionalEmbedding {
            table: ps.add_xavier(name, MAX_POSITIONS, dim, rng),
        }
    }

    pub fn apply(&self, ps: &ParamStore, seq: &mut Tensor2) -> Result<()> {
        if seq.rows() > MAX_POSITIONS {
            return Err(OscError::Precondition(format!(
                "sequence of {} rows exceeds {MAX_POSITIONS} positions",
                seq.rows()
            )));
        }
        let t = ps.value(self.table);
        for r in 0..seq.rows() {
            for (v, p) in seq.row_mut(r).iter_mut().zip(t.row(r)) {
                *v += p;
            }
        }
        Ok(())
    }

    pub fn backward(&self, dseq: &Tensor2, g: &mut Grads) {
        let gt = g.get_mut(self.table);
        for r in 0..dseq.rows() {
            for (a, d) in gt.row_mut(r).iter_mut().zip(dseq.row(r)) {
                *a += d;
            }
        }
    }
}

/// Gradient of a row-mean pool.
pub fn mean_pool_backward(rows: usize, dpooled: &[f64]) -> Tensor2 {
    let mut d = Tensor2::zeros(rows, dpooled.len());
    let s = 1.0 / rows as f64;
    for r in 0..rows {
        for (a, b) in d.row_mut(r).iter_mut().zip(dpooled) {
            *a = b * s;
        }
    }
    d
}
