//! Named parameter tensors with gradient buffers and Adam moments.

use rand::Rng;
use std::collections::HashMap;

use super::tensor::Tensor2;
use crate::error::{OscError, Result};

/// Index of a parameter inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_num: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon_num > 0.0)
        {
            return Err(OscError::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_num: 1e-8,
        }
    }
}

/// Gradient buffers aligned with a store's parameters.
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<Tensor2>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.bufs[id.0]
    }

    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.bufs.iter_mut().for_each(|b| b.scale(s));
    }

    pub fn sq_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.data().iter())
            .map(|v| v * v)
            .sum()
    }

    /// All entries concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.bufs
            .iter()
            .flat_map(|b| b.data().iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor2>,
    grads: Grads,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    step: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Grads { bufs: Vec::new() },
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Registers a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: &str, value: Tensor2) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let (r, c) = value.shape();
        let id = self.values.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(value);
        self.grads.bufs.push(Tensor2::zeros(r, c));
        self.m.push(Tensor2::zeros(r, c));
        self.v.push(Tensor2::zeros(r, c));
        ParamId(id)
    }

    /// Adds a weight matrix with Xavier-uniform entries.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Tensor2::from_vec(rows, cols, data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor2::zeros(rows, cols))
    }

    pub fn add_filled(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        let mut t = Tensor2::zeros(rows, cols);
        t.fill(v);
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Fresh zeroed buffers shaped like this store.
    pub fn zero_grads(&self) -> Grads {
        Grads {
            bufs: self
                .values
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn grads(&self) -> &Grads {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut Grads {
        &mut self.grads
    }

    pub fn accumulate(&mut self, g: &Grads) {
        self.grads.add(g);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.data().len()).sum()
    }

    /// Applies one bias-corrected Adam update from the stored gradients,
    /// then zeroes them. Nothing is modified if any gradient is non-finite.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        cfg.validate()?;
        for (i, g) in self.grads.bufs.iter().enumerate() {
            if !g.is_finite() {
                return Err(OscError::Numeric(format!(
                    "gradient of parameter '{}'",
                    self.names[i]
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..self.values.len() {
            let g = self.grads.bufs[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = self.values[i].data_mut();
            for j in 0..p.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon_num);
            }
        }
        self.grads.zero();
        Ok(())
    }

    pub(crate) fn moments(&self) -> (&[Tensor2], &[Tensor2]) {
        (&self.m, &self.v)
    }

    pub(crate) fn set_moments(&mut self, step: u64, m: Vec<Tensor2>, v: Vec<Tensor2>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }

    /// Flattened parameter values, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Mutable access to the i-th scalar in flattened order.
    pub fn scalar_mut(&mut self, mut flat: usize) -> &mut f64 {
        for t in &mut self.values {
            let n = t.data().len();
            if flat < n {
                return &mut t.data_mut()[flat];
            }
            flat -= n;
        }
        panic!("flat index out of range");
    }
}
