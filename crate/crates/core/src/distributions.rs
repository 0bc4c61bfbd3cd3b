//! Categorical, diagonal Gaussian and Bernoulli families on the tape.
//!
//! Every distribution is batched over rows: parameters of shape `[n, d]`
//! describe `n` independent distributions, and log-densities come back as
//! `[n]`. Rank-1 parameters describe a single distribution and yield scalars.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};
use crate::Rng;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Draws an index from normalized log-probabilities by inverting the CDF at
/// one uniform variate.
pub fn categorical_sample(log_probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the final partial sum
    log_probs
        .iter()
        .rposition(|lp| lp.is_finite())
        .unwrap_or(log_probs.len() - 1)
}

/// A batch of categorical distributions over the last axis of `logits`.
#[derive(Debug, Clone, Copy)]
pub struct CategoricalDist {
    pub logits: Var,
    pub log_probs: Var,
    rows: usize,
    classes: usize,
}

impl CategoricalDist {
    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self> {
        let shape = tape.shape(logits).to_vec();
        let classes = *shape.last().unwrap_or(&0);
        let rows = if shape.len() > 1 { shape[0] } else { 1 };
        let log_probs = tape.log_softmax(logits)?;
        Ok(Self {
            logits,
            log_probs,
            rows,
            classes,
        })
    }

    /// A uniform distribution over `classes` slots (no parameters).
    pub fn uniform(tape: &mut Tape, classes: usize) -> Result<Self> {
        let logits = tape.constant(&[classes], vec![0.0; classes])?;
        Self::from_logits(tape, logits)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn log_probs_row<'t>(&self, tape: &'t Tape, row: usize) -> &'t [f64] {
        &tape.value(self.log_probs)[row * self.classes..(row + 1) * self.classes]
    }

    pub fn probs_row(&self, tape: &Tape, row: usize) -> Vec<f64> {
        self.log_probs_row(tape, row).iter().map(|l| l.exp()).collect()
    }

    /// log p(index) for row 0, differentiable w.r.t. the logits.
    pub fn log_prob(&self, tape: &mut Tape, index: usize) -> Result<Var> {
        let v = self.log_prob_many(tape, &[(0, index)])?;
        Ok(tape.reshape(v, &[])?)
    }

    /// Log-probabilities at `(row, index)` pairs, as a `[picks]` vector.
    pub fn log_prob_many(&self, tape: &mut Tape, picks: &[(usize, usize)]) -> Result<Var> {
        let mut flat = Vec::with_capacity(picks.len());
        for &(row, index) in picks {
            if index >= self.classes {
                return Err(Error::IndexOutOfRange {
                    what: "categorical index",
                    index,
                    len: self.classes,
                });
            }
            if row >= self.rows {
                return Err(Error::IndexOutOfRange {
                    what: "categorical row",
                    index: row,
                    len: self.rows,
                });
            }
            flat.push(row * self.classes + index);
        }
        Ok(tape.take(self.log_probs, &flat)?)
    }

    pub fn sample(&self, tape: &Tape, row: usize, rng: &mut Rng) -> usize {
        categorical_sample(self.log_probs_row(tape, row), rng)
    }
}

/// KL(q || p) per row of `q`; `p` must have one row or as many rows as `q`.
pub fn kl_categorical(tape: &mut Tape, q: &CategoricalDist, p: &CategoricalDist) -> Result<Var> {
    if q.classes != p.classes {
        return Err(Error::SupportMismatch {
            q: q.classes,
            p: p.classes,
        });
    }
    let diff = tape.sub(q.log_probs, p.log_probs)?;
    let probs = tape.exp(q.log_probs)?;
    let terms = tape.mul(probs, diff)?;
    let axis = tape.shape(terms).len() - 1;
    Ok(tape.sum(terms, axis)?)
}

/// A batch of diagonal Gaussians parameterized by mean and log-variance.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussianDist {
    pub mean: Var,
    pub log_var: Var,
}

impl DiagGaussianDist {
    pub fn new(tape: &Tape, mean: Var, log_var: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(log_var) {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "gaussian",
                lhs: tape.shape(mean).to_vec(),
                rhs: tape.shape(log_var).to_vec(),
            }
            .into());
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(tape: &mut Tape, shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        let mean = tape.constant(shape, vec![0.0; n])?;
        let log_var = tape.constant(shape, vec![0.0; n])?;
        Ok(Self { mean, log_var })
    }

    /// Sum over the last axis of the elementwise log-density.
    pub fn log_prob(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let diff = tape.sub(z, self.mean)?;
        let sq = tape.mul(diff, diff)?;
        let neg_lv = tape.neg(self.log_var)?;
        let inv_var = tape.exp(neg_lv)?;
        let maha = tape.mul(sq, inv_var)?;
        let inner = tape.add(maha, self.log_var)?;
        let axis = tape.shape(inner).len() - 1;
        let d = tape.shape(inner)[axis] as f64;
        let s = tape.sum(inner, axis)?;
        let s = tape.scale(s, -0.5)?;
        let c = tape.scalar(-HALF_LOG_2PI * d);
        Ok(tape.add(s, c)?)
    }

    /// z = mean + exp(log_var / 2) * eps with eps supplied by the caller.
    pub fn rsample_with(&self, tape: &mut Tape, eps: Vec<f64>) -> Result<Var> {
        let shape = tape.shape(self.mean).to_vec();
        let eps = tape.constant(&shape, eps)?;
        let half = tape.scale(self.log_var, 0.5)?;
        let std = tape.exp(half)?;
        let noise = tape.mul(std, eps)?;
        Ok(tape.add(self.mean, noise)?)
    }

    /// Reparameterized draw; returns the sample and the standard-normal noise used.
    pub fn rsample(&self, tape: &mut Tape, rng: &mut Rng) -> Result<(Var, Vec<f64>)> {
        let n = tape.value(self.mean).len();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let z = self.rsample_with(tape, eps.clone())?;
        Ok((z, eps))
    }
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over the last axis.
pub fn kl_diag_gaussian(tape: &mut Tape, q: &DiagGaussianDist, p: &DiagGaussianDist) -> Result<Var> {
    let dm = tape.sub(q.mean, p.mean)?;
    let dm2 = tape.mul(dm, dm)?;
    let var_q = tape.exp(q.log_var)?;
    let num = tape.add(var_q, dm2)?;
    let neg_lvp = tape.neg(p.log_var)?;
    let inv_var_p = tape.exp(neg_lvp)?;
    let ratio = tape.mul(num, inv_var_p)?;
    let lv_diff = tape.sub(p.log_var, q.log_var)?;
    let t = tape.add(ratio, lv_diff)?;
    let axis = tape.shape(t).len() - 1;
    let d = tape.shape(t)[axis] as f64;
    let s = tape.sum(t, axis)?;
    let c = tape.scalar(-d);
    let s = tape.add(s, c)?;
    Ok(tape.scale(s, 0.5)?)
}

/// Independent Bernoulli pixels parameterized by logits.
#[derive(Debug, Clone, Copy)]
pub struct BernoulliDist {
    pub logits: Var,
}

impl BernoulliDist {
    pub fn new(logits: Var) -> Self {
        Self { logits }
    }

    /// Σ x·l − softplus(l) over the last axis; `x` must be 0/1 with the logits' shape.
    pub fn log_prob(&self, tape: &mut Tape, x: &[f64]) -> Result<Var> {
        if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::NonBinary { index, value });
        }
        let shape = tape.shape(self.logits).to_vec();
        let xv = tape.constant(&shape, x.to_vec())?;
        let xl = tape.mul(xv, self.logits)?;
        let sp = tape.softplus(self.logits)?;
        let t = tape.sub(xl, sp)?;
        let axis = shape.len() - 1;
        Ok(tape.sum(t, axis)?)
    }

    pub fn probs(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.logits)
            .iter()
            .map(|l| 1.0 / (1.0 + (-l).exp()))
            .collect()
    }

    pub fn sample(&self, tape: &Tape, rng: &mut Rng) -> Vec<u8> {
        self.probs(tape)
            .into_iter()
            .map(|p| u8::from(rng.random::<f64>() < p))
            .collect()
    }
}

/// Univariate normal density with the given mean and log-variance.
pub fn normal_pdf(x: f64, mean: f64, log_var: f64) -> f64 {
    let var = log_var.exp();
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}
