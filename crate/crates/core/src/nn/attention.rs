//! Multi-head scaled dot-product attention (self and cross).

use rand::Rng;

use super::layers::Linear;
use super::params::{Grads, ParamStore};
use super::tensor::Tensor2;
use crate::error::{OscError, Result};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    xq: Tensor2,
    xkv: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    /// One `query_rows × key_rows` probability matrix per head.
    probs: Vec<Tensor2>,
    concat: Tensor2,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Tensor2] {
        &self.probs
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(OscError::Config(format!(
                "model dim {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            wk: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            wv: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            wo: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `query_seq` attends over `kv_seq`; output has one row per query row.
    pub fn forward(
        &self,
        ps: &ParamStore,
        query_seq: &Tensor2,
        kv_seq: &Tensor2,
    ) -> Result<(Tensor2, AttentionCache)> {
        if query_seq.cols() != self.dim || kv_seq.cols() != self.dim {
            return Err(OscError::Dimension(format!(
                "attention over {}x{} queries and {}x{} keys with model dim {}",
                query_seq.rows(),
                query_seq.cols(),
                kv_seq.rows(),
                kv_seq.cols(),
                self.dim
            )));
        }
        if kv_seq.rows() == 0 {
            return Err(OscError::Precondition(
                "attention over an empty key sequence".into(),
            ));
        }
        let q = self.wq.forward(ps, query_seq);
        let k = self.wk.forward(ps, kv_seq);
        let v = self.wv.forward(ps, kv_seq);
        let (n, m) = (q.rows(), k.rows());
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor2::zeros(n, self.dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dh;
            let mut p = Tensor2::zeros(n, m);
            for i in 0..n {
                let qi = &q.row(i)[off..off + dh];
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.row(j)[off..off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(row);
            }
            for i in 0..n {
                let out = &mut concat.row_mut(i)[off..off + dh];
                for j in 0..m {
                    let a = p.get(i, j);
                    let vj = &v.row(j)[off..off + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += a * vv;
                    }
                }
            }
            probs.push(p);
        }
        let y = self.wo.forward(ps, &concat);
        Ok((
            y,
            AttentionCache {
                xq: query_seq.clone(),
                xkv: kv_seq.clone(),
                q,
                k,
                v,
                probs,
                concat,
            },
        ))
    }

    /// Returns `(d query_seq, d kv_seq)`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &AttentionCache,
        dy: &Tensor2,
        g: &mut Grads,
    ) -> (Tensor2, Tensor2) {
        let dconcat = self.wo.backward(ps, &c.concat, dy, g);
        let (n, m) = (c.q.rows(), c.k.rows());
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor2::zeros(n, self.dim);
        let mut dk = Tensor2::zeros(m, self.dim);
        let mut dv = Tensor2::zeros(m, self.dim);
        for h in 0..self.heads {
            let off = h * dh;
            let p = &c.probs[h];
            for i in 0..n {
                let dout = &dconcat.row(i)[off..off + dh];
                // dP_ij = dout · v_j
                let mut dp = vec![0.0; m];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vj = &c.v.row(j)[off..off + dh];
                    *dpj = dout.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let a = p.get(i, j);
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (d, o) in dvj.iter_mut().zip(dout) {
                        *d += a * o;
                    }
                }
                let pr = p.row(i);
                let inner: f64 = dp.iter().zip(pr).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    let ds = pr[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj: Vec<f64> = c.k.row(j)[off..off + dh].to_vec();
                    let qi: Vec<f64> = c.q.row(i)[off..off + dh].to_vec();
                    for (d, kv) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&kj) {
                        *d += ds * kv;
                    }
                    for (d, qv) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *d += ds * qv;
                    }
                }
            }
        }
        let dxq = self.wq.backward(ps, &c.xq, &dq, g);
        let mut dxkv = self.wk.backward(ps, &c.xkv, &dk, g);
        dxkv.add_assign(&self.wv.backward(ps, &c.xkv, &dv, g));
        (dxq, dxkv)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
