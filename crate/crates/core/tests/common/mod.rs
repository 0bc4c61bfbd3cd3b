#![allow(dead_code)]

use memvae::memory::MemoryBuffer;
use memvae::models::Arch;
use memvae::Rng;
use rand::Rng as _;

pub fn small_arch(x_dim: usize, z_dim: usize) -> Arch {
    Arch {
        z_dim,
        enc_hidden: vec![8],
        dec_hidden: vec![8],
        prior_hidden: vec![6],
        embed_hidden: 8,
        embed_dim: 4,
        ..Arch::desk(x_dim)
    }
}

pub fn bits(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect()
}

pub fn random_memory(slots: usize, dim: usize, rng: &mut Rng) -> MemoryBuffer {
    let rows: Vec<Vec<f64>> = (0..slots).map(|_| bits(dim, rng)).collect();
    MemoryBuffer::from_rows(&rows, None).unwrap()
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Plain forward pass of a fully connected net stored as `{prefix}.{i}.weight`
/// (`[in, out]`) and `{prefix}.{i}.bias`, ReLU between layers.
pub fn manual_mlp(store: &memvae::tensor::ParamStore, prefix: &str, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    let mut i = 0;
    while let Some(w) = store.find(&format!("{prefix}.{i}.weight")) {
        let w = store.get(w);
        let b = store.get(store.find(&format!("{prefix}.{i}.bias")).unwrap());
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        let mut out: Vec<f64> = (0..n_out)
            .map(|o| b.values()[o] + (0..n_in).map(|j| h[j] * w.values()[j * n_out + o]).sum::<f64>())
            .collect();
        i += 1;
        if store.find(&format!("{prefix}.{i}.weight")).is_some() {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h
}
