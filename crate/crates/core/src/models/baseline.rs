//! The unconditioned VAE: z ~ N(0, I), x ~ p(x|z), with encoder q(z|x).

use super::{check_batch, gaussian_noise, sizes, split_gaussian, Arch, BoundMemory, Forward, Model, Noise, SampleNoise};
use crate::distributions::{kl_diag_gaussian, BernoulliDist, DiagGaussianDist};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::tensor::{Binding, ParamStore, Tape};
use crate::Rng;

#[derive(Debug, Clone)]
pub struct BaselineVae {
    store: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    arch: Arch,
}

impl BaselineVae {
    pub fn new(arch: Arch, rng: &mut Rng) -> Result<Self> {
        if arch.z_dim == 0 {
            return Err(Error::Invalid("the baseline VAE needs z_dim > 0".into()));
        }
        let mut store = ParamStore::new();
        let (d, z) = (arch.x_dim, arch.z_dim);
        let encoder = Mlp::new(&mut store, "encoder", &sizes(d, &arch.enc_hidden, 2 * z), arch.activation, rng);
        let decoder = Mlp::new(&mut store, "decoder", &sizes(z, &arch.dec_hidden, d), arch.activation, rng);
        Ok(Self {
            store,
            encoder,
            decoder,
            arch,
        })
    }
}

/// Shared by the two single-latent models: encodes `x`, draws `k` latents per
/// example, and returns (x repeated, q, p, z, eps).
pub(crate) struct Encoded {
    pub x_rep: Vec<f64>,
    pub q: DiagGaussianDist,
    pub p: DiagGaussianDist,
    pub z: crate::tensor::Var,
    pub eps: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn encode(
    tape: &mut Tape,
    params: &Binding,
    encoder: &Mlp,
    arch: &Arch,
    x: &[f64],
    batch: usize,
    k: usize,
    noise: &mut Noise<'_>,
) -> Result<Encoded> {
    let (d, zd, n) = (arch.x_dim, arch.z_dim, batch * k);
    let xv = tape.constant(&[batch, d], x.to_vec())?;
    let out = encoder.forward(tape, params, xv)?;
    let rows: Vec<usize> = (0..n).map(|i| i / k).collect();
    let out = tape.select_rows(out, &rows)?;
    let q = split_gaussian(tape, out, zd)?;
    let p = DiagGaussianDist::standard(tape, &[n, zd])?;
    let eps = gaussian_noise(noise, n * zd)?;
    let z = q.rsample_with(tape, eps.clone())?;
    Ok(Encoded {
        x_rep: super::repeat_rows(x, batch, k),
        q,
        p,
        z,
        eps,
    })
}

/// Assembles a pass whose only latent is z.
pub(crate) fn continuous_forward(
    tape: &mut Tape,
    enc: Encoded,
    logits: crate::tensor::Var,
    batch: usize,
    k: usize,
) -> Result<Forward> {
    let n = batch * k;
    let log_q_z = enc.q.log_prob(tape, enc.z)?;
    let log_p_z = enc.p.log_prob(tape, enc.z)?;
    let kl_z = kl_diag_gaussian(tape, &enc.q, &enc.p)?;
    let log_p_x = BernoulliDist::new(logits).log_prob(tape, &enc.x_rep)?;
    let zeros = tape.constant(&[n], vec![0.0; n])?;
    let kl_a = tape.constant(&[batch], vec![0.0; batch])?;
    let t = tape.add(log_p_z, log_p_x)?;
    let log_w = tape.sub(t, log_q_z)?;
    let z_values = Some(tape.value(enc.z).to_vec());
    Ok(Forward {
        batch,
        k,
        log_w,
        log_q_a: zeros,
        log_p_a: zeros,
        log_q_z,
        log_p_z,
        log_p_x,
        kl_a,
        kl_z,
        noise: SampleNoise {
            addresses: Vec::new(),
            eps: enc.eps,
        },
        posterior: None,
        z_values,
    })
}

impl Model for BaselineVae {
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
        false
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &Binding,
        _mem: Option<BoundMemory<'_>>,
        x: &[f64],
        batch: usize,
        k: usize,
        mut noise: Noise<'_>,
    ) -> Result<Forward> {
        check_batch(x, batch, self.arch.x_dim, k)?;
        let enc = encode(tape, params, &self.encoder, &self.arch, x, batch, k, &mut noise)?;
        let logits = self.decoder.forward(tape, params, enc.z)?;
        continuous_forward(tape, enc, logits, batch, k)
    }
}
