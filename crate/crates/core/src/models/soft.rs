//! The soft-attention baseline: z ~ N(0, I) and x ~ p(x|z, m(z)), where m(z)
//! is a softmax-weighted average of all memory rows.
//!
//! Attention logits are similarities between the memory embeddings and an
//! embedding of z, so the same network serves memories of any size.

use super::baseline::{continuous_forward, encode};
use super::{check_batch, require_memory, sizes, Arch, BoundMemory, Forward, Model, Noise};
use crate::error::{Error, Result};
use crate::memory::similarity;
use crate::nn::Mlp;
use crate::tensor::{Binding, ParamStore, Tape, Var};
use crate::Rng;

#[derive(Debug, Clone)]
pub struct SoftAttention {
    store: ParamStore,
    pub encoder: Mlp,
    pub h_mem: Mlp,
    /// z → attention query embedding.
    pub h_att: Mlp,
    pub decoder: Mlp,
    arch: Arch,
}

impl SoftAttention {
    pub fn new(arch: Arch, rng: &mut Rng) -> Result<Self> {
        if arch.z_dim == 0 {
            return Err(Error::Invalid("the soft-attention model needs z_dim > 0".into()));
        }
        let mut store = ParamStore::new();
        let (d, z, e, h) = (arch.x_dim, arch.z_dim, arch.embed_dim, arch.embed_hidden);
        let encoder = Mlp::new(&mut store, "encoder", &sizes(d, &arch.enc_hidden, 2 * z), arch.activation, rng);
        let h_mem = Mlp::new(&mut store, "attn.h_mem", &[d, h, e], arch.activation, rng);
        let h_att = Mlp::new(&mut store, "attn.h_att", &[z, h, e], arch.activation, rng);
        let decoder = Mlp::new(&mut store, "decoder", &sizes(z + d, &arch.dec_hidden, d), arch.activation, rng);
        Ok(Self {
            store,
            encoder,
            h_mem,
            h_att,
            decoder,
            arch,
        })
    }

    /// Attention weights `[n, |M|]` for latents `[n, z]`.
    pub fn attention(&self, tape: &mut Tape, params: &Binding, mem: Var, z: Var) -> Result<Var> {
        let e_mem = self.h_mem.forward(tape, params, mem)?;
        let e_z = self.h_att.forward(tape, params, z)?;
        let logits = similarity(tape, e_mem, e_z, self.arch.similarity)?;
        let lp = tape.log_softmax(logits)?;
        Ok(tape.exp(lp)?)
    }

    /// m(z): the attention-weighted memory average, `[n, D]`.
    pub fn read(&self, tape: &mut Tape, params: &Binding, mem: Var, z: Var) -> Result<Var> {
        let w = self.attention(tape, params, mem, z)?;
        Ok(tape.matmul(w, mem)?)
    }
}

impl Model for SoftAttention {
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
        check_batch(x, batch, self.arch.x_dim, k)?;
        let mem = require_memory(mem, self.arch.x_dim)?;
        let enc = encode(tape, params, &self.encoder, &self.arch, x, batch, k, &mut noise)?;
        let m_z = self.read(tape, params, mem.var, enc.z)?;
        let dec_in = tape.concat_cols(enc.z, m_z)?;
        let logits = self.decoder.forward(tape, params, dec_in)?;
        continuous_forward(tape, enc, logits, batch, k)
    }
}
