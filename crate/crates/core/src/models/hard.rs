//! The hard-attention memory model: a ~ p(a), z ~ p(z|m_a), x ~ p(x|z, m_a),
//! with inference network q(a|x) q(z|m_a, x).

use super::{
    check_batch, gaussian_noise, repeat_rows, require_memory, sizes, split_gaussian, Arch, BoundMemory,
    Forward, Model, Noise, SampleNoise,
};
use crate::distributions::{kl_categorical, kl_diag_gaussian, BernoulliDist};
use crate::error::{Error, Result};
use crate::memory::{address_prior, AddressDistPair, EmbeddingNets, MemoryBuffer};
use crate::nn::Mlp;
use crate::tensor::{Binding, ParamStore, Tape, Var};
use crate::Rng;

#[derive(Debug, Clone)]
pub struct MemVae {
    store: ParamStore,
    pub nets: EmbeddingNets,
    /// m_a → (mean, log-variance) of p(z|m_a); absent when z_dim = 0.
    pub prior_z: Option<Mlp>,
    /// [x, m_a] → (mean, log-variance) of q(z|m_a, x); absent when z_dim = 0.
    pub posterior_z: Option<Mlp>,
    /// [z, m_a] → pixel logits.
    pub decoder: Mlp,
    arch: Arch,
}

/// One draw (a, z) ~ q(a|x) q(z|m_a, x) and the five log terms of its weight.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub a: usize,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub log_q_a: f64,
    pub log_q_z: f64,
    pub log_p_a: f64,
    pub log_p_z: f64,
    pub log_p_x: f64,
}

impl JointSample {
    pub fn log_weight(&self) -> f64 {
        self.log_p_a + self.log_p_z + self.log_p_x - self.log_q_a - self.log_q_z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZMode {
    Sample,
    /// Use the prior mean of p(z|m_a).
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub a: usize,
    pub probs: Vec<f64>,
    pub pixels: Vec<u8>,
}

impl MemVae {
    pub fn new(arch: Arch, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let (d, z) = (arch.x_dim, arch.z_dim);
        let nets = EmbeddingNets::new(&mut store, "addr", d, arch.embed_hidden, arch.embed_dim, arch.activation, rng);
        let (prior_z, posterior_z) = if z > 0 {
            (
                Some(Mlp::new(&mut store, "prior_z", &sizes(d, &arch.prior_hidden, 2 * z), arch.activation, rng)),
                Some(Mlp::new(&mut store, "posterior_z", &sizes(2 * d, &arch.enc_hidden, 2 * z), arch.activation, rng)),
            )
        } else {
            (None, None)
        };
        let decoder = Mlp::new(&mut store, "decoder", &sizes(z + d, &arch.dec_hidden, d), arch.activation, rng);
        Self {
            store,
            nets,
            prior_z,
            posterior_z,
            decoder,
            arch,
        }
    }

    /// q(a|x) for each of `batch` examples, as probabilities.
    pub fn address_posterior_probs(&self, mem: &MemoryBuffer, x: &[f64], batch: usize) -> Result<Vec<Vec<f64>>> {
        check_batch(x, batch, self.arch.x_dim, 1)?;
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let m = require_memory(Some(BoundMemory::bind(&mut tape, mem)), self.arch.x_dim)?;
        let xv = tape.constant(&[batch, self.arch.x_dim], x.to_vec())?;
        let pair = AddressDistPair::compute(
            &mut tape,
            &self.nets,
            &params,
            m.var,
            xv,
            self.arch.prior_mode,
            self.arch.similarity,
        )?;
        Ok((0..batch).map(|b| pair.posterior.probs_row(&tape, b)).collect())
    }

    /// p(a) over the slots of `mem`.
    pub fn address_prior_probs(&self, mem: &MemoryBuffer) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let mv = mem.bind(&mut tape);
        let e_mem = self.nets.embed_memory(&mut tape, &params, mv)?;
        let prior = address_prior(&mut tape, &self.nets, &params, e_mem, self.arch.prior_mode, self.arch.similarity)?;
        Ok(prior.probs_row(&tape, 0))
    }

    /// Decoder logits, given selected memory rows `[n, D]` and latents `[n, z]`.
    fn decode(&self, tape: &mut Tape, params: &Binding, z: Option<Var>, m_sel: Var) -> Result<Var> {
        let input = match z {
            Some(z) => tape.concat_cols(z, m_sel)?,
            None => m_sel,
        };
        self.decoder.forward(tape, params, input)
    }

    /// Bernoulli means of p(x|z, m) for one latent and one memory row.
    pub fn decode_probs(&self, z: &[f64], m: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.arch.z_dim || m.len() != self.arch.x_dim {
            return Err(Error::Invalid(format!(
                "decoder takes z of {} and m of {} values, got {} and {}",
                self.arch.z_dim,
                self.arch.x_dim,
                z.len(),
                m.len()
            )));
        }
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let mv = tape.constant(&[1, m.len()], m.to_vec())?;
        let zv = match self.arch.z_dim {
            0 => None,
            n => Some(tape.constant(&[1, n], z.to_vec())?),
        };
        let logits = self.decode(&mut tape, &params, zv, mv)?;
        Ok(BernoulliDist::new(logits).probs(&tape))
    }

    /// Draws (a, z) for a single example and evaluates its log terms.
    pub fn joint_sample(&self, mem: &MemoryBuffer, x: &[f64], rng: &mut Rng) -> Result<JointSample> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let m = BoundMemory::bind(&mut tape, mem);
        let f = self.forward(&mut tape, &params, Some(m), x, 1, 1, Noise::Sample(rng))?;
        Ok(self.read_sample(&tape, &f))
    }

    fn read_sample(&self, tape: &Tape, f: &Forward) -> JointSample {
        let a = f.noise.addresses[0];
        let eps = f.noise.eps.clone();
        let z = match self.arch.z_dim {
            0 => Vec::new(),
            _ => f.z_values.clone().unwrap_or_default(),
        };
        JointSample {
            a,
            z,
            eps,
            log_q_a: tape.value(f.log_q_a)[0],
            log_q_z: tape.value(f.log_q_z)[0],
            log_p_a: tape.value(f.log_p_a)[0],
            log_p_z: tape.value(f.log_p_z)[0],
            log_p_x: tape.value(f.log_p_x)[0],
        }
    }

    /// log p(x) by enumerating every address, with `z_draws` importance
    /// samples from q(z|m_a, x) per address (exact when z_dim = 0).
    pub fn marginal_log_likelihood_exact(
        &self,
        mem: &MemoryBuffer,
        x: &[f64],
        z_draws: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        let slots = mem.len();
        let draws = if self.arch.z_dim == 0 { 1 } else { z_draws.max(1) };
        let noise = SampleNoise {
            addresses: (0..slots).flat_map(|a| std::iter::repeat_n(a, draws)).collect(),
            eps: {
                let n = slots * draws * self.arch.z_dim;
                gaussian_noise(&mut Noise::Sample(rng), n)?
            },
        };
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let m = BoundMemory::bind(&mut tape, mem);
        let f = self.forward(&mut tape, &params, Some(m), x, 1, slots * draws, Noise::Replay(&noise))?;
        let (pa, pz, px, qz) = (
            tape.value(f.log_p_a),
            tape.value(f.log_p_z),
            tape.value(f.log_p_x),
            tape.value(f.log_q_z),
        );
        let per_slot: Vec<f64> = (0..slots)
            .map(|a| {
                let terms = (a * draws..(a + 1) * draws).map(|i| pz[i] + px[i] - qz[i]);
                logsumexp(terms) - (draws as f64).ln() + pa[a * draws]
            })
            .collect();
        Ok(logsumexp(per_slot.into_iter()))
    }

    /// Ancestral samples. With `fixed` set, every sample uses that slot.
    pub fn generate(
        &self,
        mem: &MemoryBuffer,
        n: usize,
        fixed: Option<usize>,
        z_mode: ZMode,
        rng: &mut Rng,
    ) -> Result<Vec<Generated>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if let Some(a) = fixed {
            if a >= mem.len() {
                return Err(Error::IndexOutOfRange {
                    what: "memory address",
                    index: a,
                    len: mem.len(),
                });
            }
        }
        let prior_probs = self.address_prior_probs(mem)?;
        let log_prior: Vec<f64> = prior_probs.iter().map(|p| p.ln()).collect();
        let addresses: Vec<usize> = (0..n)
            .map(|_| fixed.unwrap_or_else(|| crate::distributions::categorical_sample(&log_prior, rng)))
            .collect();
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let mv = mem.bind(&mut tape);
        let m_sel = tape.select_rows(mv, &addresses)?;
        let z = match &self.prior_z {
            None => None,
            Some(net) => {
                let out = net.forward(&mut tape, &params, m_sel)?;
                let p = split_gaussian(&mut tape, out, self.arch.z_dim)?;
                Some(match z_mode {
                    ZMode::Mean => p.mean,
                    ZMode::Sample => p.rsample(&mut tape, rng)?.0,
                })
            }
        };
        let logits = self.decode(&mut tape, &params, z, m_sel)?;
        let dist = BernoulliDist::new(logits);
        let probs = dist.probs(&tape);
        let pixels = dist.sample(&tape, rng);
        let d = self.arch.x_dim;
        Ok(addresses
            .iter()
            .enumerate()
            .map(|(i, &a)| Generated {
                a,
                probs: probs[i * d..(i + 1) * d].to_vec(),
                pixels: pixels[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }
}

pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Model for MemVae {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn arch(&self) -> &Arch {
        &self.arch
    }

    fn uses_memory(&self) -> bool {
        true
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        mem: Option<BoundMemory<'_>>,
        x: &[f64],
        batch: usize,
        k: usize,
        mut noise: Noise<'_>,
    ) -> Result<Forward> {
        let d = self.arch.x_dim;
        let zd = self.arch.z_dim;
        check_batch(x, batch, d, k)?;
        let mem = require_memory(mem, d)?;
        let n = batch * k;

        let xv = tape.constant(&[batch, d], x.to_vec())?;
        let pair = AddressDistPair::compute(
            tape,
            &self.nets,
            params,
            mem.var,
            xv,
            self.arch.prior_mode,
            self.arch.similarity,
        )?;
        let addresses = match &mut noise {
            Noise::Sample(rng) => (0..n).map(|i| pair.posterior.sample(tape, i / k, rng)).collect(),
            Noise::Replay(s) => {
                if s.addresses.len() != n {
                    return Err(Error::Invalid(format!(
                        "replayed noise has {} addresses, pass needs {n}",
                        s.addresses.len()
                    )));
                }
                s.addresses.clone()
            }
        };
        let picks: Vec<(usize, usize)> = addresses.iter().enumerate().map(|(i, &a)| (i / k, a)).collect();
        let log_q_a = pair.posterior.log_prob_many(tape, &picks)?;
        let prior_picks: Vec<(usize, usize)> = addresses.iter().map(|&a| (0, a)).collect();
        let log_p_a = pair.prior.log_prob_many(tape, &prior_picks)?;
        let kl_a = kl_categorical(tape, &pair.posterior, &pair.prior)?;

        let m_sel = tape.select_rows(mem.var, &addresses)?;
        let x_rep = repeat_rows(x, batch, k);
        let eps = gaussian_noise(&mut noise, n * zd)?;
        let (z, log_q_z, log_p_z, kl_z, z_values) = match (&self.posterior_z, &self.prior_z) {
            (Some(post), Some(prior)) => {
                let xr = tape.constant(&[n, d], x_rep.clone())?;
                let enc_in = tape.concat_cols(xr, m_sel)?;
                let q_out = post.forward(tape, params, enc_in)?;
                let q = split_gaussian(tape, q_out, zd)?;
                let p_out = prior.forward(tape, params, m_sel)?;
                let p = split_gaussian(tape, p_out, zd)?;
                let z = q.rsample_with(tape, eps.clone())?;
                let log_q_z = q.log_prob(tape, z)?;
                let log_p_z = p.log_prob(tape, z)?;
                let kl_z = kl_diag_gaussian(tape, &q, &p)?;
                let zv = tape.value(z).to_vec();
                (Some(z), log_q_z, log_p_z, kl_z, Some(zv))
            }
            _ => {
                let zeros = tape.constant(&[n], vec![0.0; n])?;
                (None, zeros, zeros, zeros, None)
            }
        };
        let logits = self.decode(tape, params, z, m_sel)?;
        let log_p_x = BernoulliDist::new(logits).log_prob(tape, &x_rep)?;

        let t = tape.add(log_p_a, log_p_z)?;
        let t = tape.add(t, log_p_x)?;
        let t = tape.sub(t, log_q_a)?;
        let log_w = tape.sub(t, log_q_z)?;
        Ok(Forward {
            batch,
            k,
            log_w,
            log_q_a,
            log_p_a,
            log_q_z,
            log_p_z,
            log_p_x,
            kl_a,
            kl_z,
            noise: SampleNoise { addresses, eps },
            posterior: Some(pair.posterior),
            z_values,
        })
    }
}

