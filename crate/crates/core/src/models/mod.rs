//! Generative models sharing one batched K-sample forward interface.
//!
//! Every forward pass evaluates `K` posterior samples for each of `B`
//! examples and returns the per-sample log terms as `[B·K]` tape nodes,
//! sample `k` of example `b` at position `b·K + k`.

pub mod baseline;
pub mod hard;
pub mod soft;

use crate::error::{Error, Result};
use crate::memory::{MemoryBuffer, PriorMode, SimilarityKind};
use crate::nn::Activation;
use crate::tensor::{Binding, ParamStore, Tape, Var};
use crate::Rng;

pub use baseline::BaselineVae;
pub use hard::{Generated, JointSample, MemVae, ZMode};
pub use soft::SoftAttention;

/// Network sizes shared by all three models.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub x_dim: usize,
    pub z_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    /// Hidden widths of the conditional prior p(z|m_a).
    pub prior_hidden: Vec<usize>,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub similarity: SimilarityKind,
    pub prior_mode: PriorMode,
    pub activation: Activation,
}

impl Arch {
    /// Small fully connected defaults for desk-scale runs.
    pub fn desk(x_dim: usize) -> Self {
        Self {
            x_dim,
            z_dim: 8,
            enc_hidden: vec![64, 32],
            dec_hidden: vec![32, 64],
            prior_hidden: vec![32],
            embed_hidden: 128,
            embed_dim: 32,
            similarity: SimilarityKind::NormalizedInner,
            prior_mode: PriorMode::Learned,
            activation: Activation::Relu,
        }
    }
}

pub(crate) fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Recorded randomness of one forward pass, for replaying it exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleNoise {
    /// One address per sample (empty for models without addresses).
    pub addresses: Vec<usize>,
    /// Standard-normal draws, `z_dim` per sample.
    pub eps: Vec<f64>,
}

pub enum Noise<'a> {
    Sample(&'a mut Rng),
    Replay(&'a SampleNoise),
}

/// Per-sample log terms of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub batch: usize,
    pub k: usize,
    pub log_w: Var,
    pub log_q_a: Var,
    pub log_p_a: Var,
    pub log_q_z: Var,
    pub log_p_z: Var,
    pub log_p_x: Var,
    /// Analytic KL(q(a|x) || p(a)), `[B]`.
    pub kl_a: Var,
    /// Analytic KL(q(z|·) || p(z|·)) at each sample, `[B·K]`.
    pub kl_z: Var,
    pub noise: SampleNoise,
    /// q(a|x) as `[B, |M|]` probabilities, for the hard model.
    pub posterior: Option<crate::distributions::CategoricalDist>,
    /// Sampled latents, `[B·K, z_dim]` row-major.
    pub z_values: Option<Vec<f64>>,
}

impl Forward {
    /// Values of a `[B·K]` node for example `b`.
    pub fn example<'t>(&self, tape: &'t Tape, v: Var, b: usize) -> &'t [f64] {
        &tape.value(v)[b * self.k..(b + 1) * self.k]
    }
}

/// The single-sample decomposition of the bound at each sample.
#[derive(Debug, Clone, Copy)]
pub struct ElboTerms {
    /// log p(x|a, z), `[B·K]`.
    pub recon: Var,
    /// `[B·K]`, repeated across the samples of each example.
    pub kl_a: Var,
    pub kl_z: Var,
    /// The sampled log-weight with its address and latent log-ratios swapped
    /// for the analytic KLs, `[B·K]`.
    pub elbo: Var,
}

pub fn elbo_terms(tape: &mut Tape, f: &Forward) -> Result<ElboTerms> {
    let (b, k) = (f.batch, f.k);
    let kl_a_col = tape.reshape(f.kl_a, &[b, 1])?;
    let ones = tape.constant(&[b, k], vec![1.0; b * k])?;
    let kl_a = tape.mul(ones, kl_a_col)?;
    let kl_a = tape.reshape(kl_a, &[b * k])?;
    let ratio_a = tape.sub(f.log_p_a, f.log_q_a)?;
    let corr_a = tape.add(ratio_a, kl_a)?;
    let ratio_z = tape.sub(f.log_p_z, f.log_q_z)?;
    let corr_z = tape.add(ratio_z, f.kl_z)?;
    let e = tape.sub(f.log_w, corr_a)?;
    let elbo = tape.sub(e, corr_z)?;
    Ok(ElboTerms {
        recon: f.log_p_x,
        kl_a,
        kl_z: f.kl_z,
        elbo,
    })
}

/// Memory placed on a tape for one pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundMemory<'m> {
    pub buffer: &'m MemoryBuffer,
    pub var: Var,
}

impl<'m> BoundMemory<'m> {
    pub fn bind(tape: &mut Tape, buffer: &'m MemoryBuffer) -> Self {
        Self {
            buffer,
            var: buffer.bind(tape),
        }
    }
}

pub trait Model {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn arch(&self) -> &Arch;

    /// Whether the model reads memory at all.
    fn uses_memory(&self) -> bool;

    /// `x` holds `batch` binary images back to back.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        mem: Option<BoundMemory<'_>>,
        x: &[f64],
        batch: usize,
        k: usize,
        noise: Noise<'_>,
    ) -> Result<Forward>;
}

/// The models selectable from a config.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Hard(MemVae),
    Vae(BaselineVae),
    Soft(SoftAttention),
}

impl AnyModel {
    pub fn as_hard(&self) -> Option<&MemVae> {
        match self {
            Self::Hard(m) => Some(m),
            _ => None,
        }
    }
}

impl Model for AnyModel {
    fn store(&self) -> &ParamStore {
        match self {
            Self::Hard(m) => m.store(),
            Self::Vae(m) => m.store(),
            Self::Soft(m) => m.store(),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Hard(m) => m.store_mut(),
            Self::Vae(m) => m.store_mut(),
            Self::Soft(m) => m.store_mut(),
        }
    }

    fn arch(&self) -> &Arch {
        match self {
            Self::Hard(m) => m.arch(),
            Self::Vae(m) => m.arch(),
            Self::Soft(m) => m.arch(),
        }
    }

    fn uses_memory(&self) -> bool {
        !matches!(self, Self::Vae(_))
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        mem: Option<BoundMemory<'_>>,
        x: &[f64],
        batch: usize,
        k: usize,
        noise: Noise<'_>,
    ) -> Result<Forward> {
        match self {
            Self::Hard(m) => m.forward(tape, params, mem, x, batch, k, noise),
            Self::Vae(m) => m.forward(tape, params, mem, x, batch, k, noise),
            Self::Soft(m) => m.forward(tape, params, mem, x, batch, k, noise),
        }
    }
}

pub(crate) fn check_batch(x: &[f64], batch: usize, x_dim: usize, k: usize) -> Result<()> {
    if batch == 0 || k == 0 {
        return Err(Error::Invalid("batch and K must be positive".into()));
    }
    if x.len() != batch * x_dim {
        return Err(Error::Invalid(format!(
            "{} input values for {batch} examples of {x_dim} pixels",
            x.len()
        )));
    }
    Ok(())
}

pub(crate) fn require_memory<'m>(mem: Option<BoundMemory<'m>>, x_dim: usize) -> Result<BoundMemory<'m>> {
    let mem = mem.ok_or_else(|| Error::Invalid("this model needs a memory".into()))?;
    if mem.buffer.dim() != x_dim {
        return Err(Error::Invalid(format!(
            "memory rows have {} values, model expects {x_dim}",
            mem.buffer.dim()
        )));
    }
    Ok(mem)
}

/// Each of the `batch` rows of `x`, repeated `k` times.
pub(crate) fn repeat_rows(x: &[f64], batch: usize, k: usize) -> Vec<f64> {
    let d = x.len() / batch;
    let mut out = Vec::with_capacity(x.len() * k);
    for row in x.chunks_exact(d) {
        for _ in 0..k {
            out.extend_from_slice(row);
        }
    }
    out
}

/// Standard-normal noise for `n` samples, drawn or replayed.
pub(crate) fn gaussian_noise(noise: &mut Noise<'_>, n: usize) -> Result<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    match noise {
        Noise::Sample(rng) => Ok((0..n).map(|_| StandardNormal.sample(*rng)).collect()),
        Noise::Replay(s) => {
            if s.eps.len() != n {
                return Err(Error::Invalid(format!(
                    "replayed noise has {} values, pass needs {n}",
                    s.eps.len()
                )));
            }
            Ok(s.eps.clone())
        }
    }
}

/// Gaussian parameters from a net emitting `[rows, 2·z]` (mean then log-variance).
pub(crate) fn split_gaussian(tape: &mut Tape, out: Var, z: usize) -> Result<crate::distributions::DiagGaussianDist> {
    let mean = tape.narrow_cols(out, 0, z)?;
    let log_var = tape.narrow_cols(out, z, z)?;
    crate::distributions::DiagGaussianDist::new(tape, mean, log_var)
}
