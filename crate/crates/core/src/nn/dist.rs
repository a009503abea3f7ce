//! Softmax, categorical and Beta distributions with analytic gradients.

use statrs::function::gamma::{digamma, ln_gamma};

use super::attention::softmax_in_place;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// Categorical distribution parameterized by unnormalized logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    pub logits: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: Vec<f64>) -> Self {
        Categorical { logits }
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn log_prob(&self, idx: usize) -> f64 {
        log_softmax(&self.logits)[idx]
    }

    pub fn entropy(&self) -> f64 {
        log_softmax(&self.logits)
            .iter()
            .map(|lp| -lp.exp() * lp)
            .sum()
    }

    /// d log p(idx) / d logits.
    pub fn log_prob_grad(&self, idx: usize) -> Vec<f64> {
        let mut g: Vec<f64> = self.probs().iter().map(|p| -p).collect();
        g[idx] += 1.0;
        g
    }

    /// d entropy / d logits.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let lp = log_softmax(&self.logits);
        let h: f64 = lp.iter().map(|l| -l.exp() * l).sum();
        lp.iter().map(|l| -l.exp() * (l + h)).collect()
    }

    /// First index of the largest logit.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.logits.iter().enumerate() {
            if *v > self.logits[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF sample from a uniform draw in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        let p = self.probs();
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    }
}

/// Interior margin applied before evaluating Beta densities.
pub const BETA_EDGE: f64 = 1e-6;

pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(BETA_EDGE, 1.0 - BETA_EDGE)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Beta {
    pub alpha: f64,
    pub beta: f64,
}

impl Beta {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Beta { alpha, beta }
    }

    fn ln_b(&self) -> f64 {
        ln_gamma(self.alpha) + ln_gamma(self.beta) - ln_gamma(self.alpha + self.beta)
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let x = clamp_unit(x);
        (self.alpha - 1.0) * x.ln() + (self.beta - 1.0) * (1.0 - x).ln() - self.ln_b()
    }

    pub fn entropy(&self) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        self.ln_b() - (a - 1.0) * digamma(a) - (b - 1.0) * digamma(b)
            + (a + b - 2.0) * digamma(a + b)
    }

    /// `(d/dα, d/dβ)` of the log density at `x`.
    pub fn log_density_grad(&self, x: f64) -> (f64, f64) {
        let x = clamp_unit(x);
        let s = digamma(self.alpha + self.beta);
        (
            x.ln() - digamma(self.alpha) + s,
            (1.0 - x).ln() - digamma(self.beta) + s,
        )
    }

    /// `(d/dα, d/dβ)` of the entropy.
    pub fn entropy_grad(&self) -> (f64, f64) {
        let (a, b) = (self.alpha, self.beta);
        let t = (a + b - 2.0) * trigamma(a + b);
        (-(a - 1.0) * trigamma(a) + t, -(b - 1.0) * trigamma(b) + t)
    }
}

/// Second derivative of ln Γ, by upward recurrence and the asymptotic series.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 16.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}
