//! Dense layers, layer normalization and pointwise activations.

use rand::Rng;

use super::params::{Grads, ParamId, ParamStore};
use super::tensor::{mm, mm_nt, mm_tn_acc, Tensor2};
use crate::error::{OscError, Result};

/// `input · weight + bias`, with the bias broadcast over rows.
pub fn dense_forward(input: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    if input.cols() != weight.rows() || bias.len() != weight.cols() {
        return Err(OscError::Dimension(format!(
            "dense input {}x{} with weight {}x{} and bias {}",
            input.rows(),
            input.cols(),
            weight.rows(),
            weight.cols(),
            bias.len()
        )));
    }
    let mut out = mm(input, weight);
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_xavier(&format!("{name}.w"), in_dim, out_dim, rng);
        let b = ps.add_zeros(&format!("{name}.b"), 1, out_dim);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2) -> Tensor2 {
        dense_forward(x, ps.value(self.w), ps.value(self.b).data())
            .unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn forward_vec(&self, ps: &ParamStore, x: &[f64]) -> Vec<f64> {
        self.forward(ps, &Tensor2::row_vector(x)).into_vec()
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, ps: &ParamStore, x: &Tensor2, dy: &Tensor2, g: &mut Grads) -> Tensor2 {
        self.backward_params(x, dy, g);
        mm_nt(dy, ps.value(self.w))
    }

    /// Parameter gradients only, for layers fed by constants.
    pub fn backward_params(&self, x: &Tensor2, dy: &Tensor2, g: &mut Grads) {
        mm_tn_acc(x, dy, g.get_mut(self.w));
        let db = g.get_mut(self.b).data_mut();
        for r in 0..dy.rows() {
            for (d, v) in db.iter_mut().zip(dy.row(r)) {
                *d += v;
            }
        }
    }

    pub fn backward_vec(&self, ps: &ParamStore, x: &[f64], dy: &[f64], g: &mut Grads) -> Vec<f64> {
        self.backward(ps, &Tensor2::row_vector(x), &Tensor2::row_vector(dy), g)
            .into_vec()
    }
}

pub const LN_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
}

/// Per-row standardization without the affine part.
pub fn standardize_rows(x: &Tensor2) -> (Tensor2, Vec<f64>) {
    let d = x.cols() as f64;
    let mut xhat = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv.push(is);
    }
    (xhat, inv)
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = ps.add_filled(&format!("{name}.gamma"), 1, dim, 1.0);
        let beta = ps.add_zeros(&format!("{name}.beta"), 1, dim);
        LayerNorm { gamma, beta, dim }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor2) -> (Tensor2, LayerNormCache) {
        let (xhat, inv_std) = standardize_rows(x);
        let gamma = ps.value(self.gamma).data();
        let beta = ps.value(self.beta).data();
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            for ((v, g), b) in y.row_mut(r).iter_mut().zip(gamma).zip(beta) {
                *v = *v * g + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor2,
        g: &mut Grads,
    ) -> Tensor2 {
        let gamma = ps.value(self.gamma).data();
        let d = self.dim as f64;
        {
            let dg = g.get_mut(self.gamma).data_mut();
            for r in 0..dy.rows() {
                for ((acc, dyv), xh) in dg.iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                    *acc += dyv * xh;
                }
            }
        }
        {
            let db = g.get_mut(self.beta).data_mut();
            for r in 0..dy.rows() {
                for (acc, dyv) in db.iter_mut().zip(dy.row(r)) {
                    *acc += dyv;
                }
            }
        }
        let mut dx = Tensor2::zeros(dy.rows(), dy.cols());
        for r in 0..dy.rows() {
            let xh = cache.xhat.row(r);
            let dxhat: Vec<f64> = dy.row(r).iter().zip(gamma).map(|(a, b)| a * b).collect();
            let sum: f64 = dxhat.iter().sum();
            let sum_x: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
            let is = cache.inv_std[r];
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = is / d * (d * dxhat[c] - sum - xh[c] * sum_x);
            }
        }
        dx
    }
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Masks `dy` by the sign of the pre-activation.
pub fn relu_backward(pre: &Tensor2, dy: &Tensor2) -> Tensor2 {
    let mut dx = dy.clone();
    for (d, p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if *p <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
