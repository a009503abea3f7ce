//! Gated recurrent cell.

use rand::Rng;

use super::layers::{sigmoid, Linear};
use super::params::{Grads, ParamStore};
use super::tensor::Tensor2;
use crate::error::{OscError, Result};

/// Reset/update/candidate gates packed as `[r | z | n]` in both projections.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug)]
pub struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    ah_n: Vec<f64>,
}

impl GruCell {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        GruCell {
            input: Linear::new(ps, &format!("{name}.wx"), input_dim, 3 * hidden_dim, rng),
            hidden: Linear::new(ps, &format!("{name}.wh"), hidden_dim, 3 * hidden_dim, rng),
            input_dim,
            hidden_dim,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamStore,
        state: &[f64],
        input: &[f64],
    ) -> Result<(Vec<f64>, GruCache)> {
        if state.len() != self.hidden_dim || input.len() != self.input_dim {
            return Err(OscError::Dimension(format!(
                "gru expects state {} and input {}, got {} and {}",
                self.hidden_dim,
                self.input_dim,
                state.len(),
                input.len()
            )));
        }
        let hd = self.hidden_dim;
        let ax = self.input.forward_vec(ps, input);
        let ah = self.hidden.forward_vec(ps, state);
        let mut r = vec![0.0; hd];
        let mut z = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut out = vec![0.0; hd];
        for i in 0..hd {
            r[i] = sigmoid(ax[i] + ah[i]);
            z[i] = sigmoid(ax[hd + i] + ah[hd + i]);
            n[i] = (ax[2 * hd + i] + r[i] * ah[2 * hd + i]).tanh();
            out[i] = (1.0 - z[i]) * n[i] + z[i] * state[i];
        }
        let cache = GruCache {
            x: input.to_vec(),
            h: state.to_vec(),
            r,
            z,
            n,
            ah_n: ah[2 * hd..].to_vec(),
        };
        Ok((out, cache))
    }

    /// Returns `(d state, d input)`.
    pub fn backward(
        &self,
        ps: &ParamStore,
        c: &GruCache,
        dout: &[f64],
        g: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = self.hidden_dim;
        let mut dax = vec![0.0; 3 * hd];
        let mut dah = vec![0.0; 3 * hd];
        let mut dh = vec![0.0; hd];
        for i in 0..hd {
            let d = dout[i];
            let dz = d * (c.h[i] - c.n[i]);
            let dn_pre = d * (1.0 - c.z[i]) * (1.0 - c.n[i] * c.n[i]);
            let dr_pre = dn_pre * c.ah_n[i] * c.r[i] * (1.0 - c.r[i]);
            let dz_pre = dz * c.z[i] * (1.0 - c.z[i]);
            dax[i] = dr_pre;
            dax[hd + i] = dz_pre;
            dax[2 * hd + i] = dn_pre;
            dah[i] = dr_pre;
            dah[hd + i] = dz_pre;
            dah[2 * hd + i] = dn_pre * c.r[i];
            dh[i] = d * c.z[i];
        }
        let dx = self.input.backward_vec(ps, &c.x, &dax, g);
        let dh_proj = self.hidden.backward(
            ps,
            &Tensor2::row_vector(&c.h),
            &Tensor2::row_vector(&dah),
            g,
        );
        for (a, b) in dh.iter_mut().zip(dh_proj.data()) {
            *a += b;
        }
        (dh, dx)
    }
}
