//! The K-sample bound L = log (1/K) Σ_k ω̃_k and its VIMCO gradient estimator.

use crate::error::{Error, Result};
use crate::models::hard::logsumexp;
use crate::models::{BoundMemory, Forward, MemVae, Model, Noise, SampleNoise};
use crate::memory::MemoryBuffer;
use crate::tensor::{Binding, ParamStore, Tape, Var};
use crate::Rng;

/// Largest number of address tuples the enumeration oracle will visit.
pub const MAX_ENUMERATED_TUPLES: usize = 10_000;

/// K samples for one example with their weights and learning signals.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    pub log_w: Vec<f64>,
    pub norm_w: Vec<f64>,
    /// Present for K ≥ 2.
    pub learning_signal: Option<Vec<f64>>,
    pub bound: f64,
    pub log_q_a: Vec<f64>,
    pub log_q_z: Vec<f64>,
    pub log_p_a: Vec<f64>,
    pub log_p_z: Vec<f64>,
    pub log_p_x: Vec<f64>,
    /// The addresses and latent noise behind each sample.
    pub noise: SampleNoise,
}

impl PosteriorSampleSet {
    pub fn k(&self) -> usize {
        self.log_w.len()
    }
}

pub fn bound(log_w: &[f64]) -> f64 {
    logsumexp(log_w.iter().copied()) - (log_w.len() as f64).ln()
}

/// softmax(log_w).
pub fn normalized_weights(log_w: &[f64]) -> Vec<f64> {
    let l = logsumexp(log_w.iter().copied());
    log_w.iter().map(|w| (w - l).exp()).collect()
}

/// logsumexp of every element except `k`, from prefix and suffix sums so no
/// exponentials are subtracted.
fn leave_one_out_lse(log_w: &[f64]) -> Vec<f64> {
    let k = log_w.len();
    let combine = |a: f64, b: f64| {
        let m = a.max(b);
        if m == f64::NEG_INFINITY {
            m
        } else {
            m + ((a - m).exp() + (b - m).exp()).ln()
        }
    };
    let mut prefix = vec![f64::NEG_INFINITY; k + 1];
    for i in 0..k {
        prefix[i + 1] = combine(prefix[i], log_w[i]);
    }
    let mut suffix = vec![f64::NEG_INFINITY; k + 1];
    for i in (0..k).rev() {
        suffix[i] = combine(suffix[i + 1], log_w[i]);
    }
    (0..k).map(|i| combine(prefix[i], suffix[i + 1])).collect()
}

/// ω_φ^(k) = L − [log (1/(K−1)) Σ_{k'≠k} ω̃_k'] − ω_k.
pub fn vimco_learning_signal(log_w: &[f64]) -> Result<Vec<f64>> {
    let k = log_w.len();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "the leave-one-out learning signal needs K >= 2, got {k}"
        )));
    }
    let l = bound(log_w);
    let norm = normalized_weights(log_w);
    let loo = leave_one_out_lse(log_w);
    let log_km1 = ((k - 1) as f64).ln();
    Ok((0..k).map(|i| l - (loo[i] - log_km1) - norm[i]).collect())
}

/// The sample sets of every example in a pass.
pub fn sample_sets(tape: &Tape, f: &Forward) -> Vec<PosteriorSampleSet> {
    let zd = if f.k == 0 { 0 } else { f.noise.eps.len() / (f.batch * f.k) };
    (0..f.batch)
        .map(|b| {
            let log_w = f.example(tape, f.log_w, b).to_vec();
            let range = b * f.k..(b + 1) * f.k;
            PosteriorSampleSet {
                norm_w: normalized_weights(&log_w),
                learning_signal: vimco_learning_signal(&log_w).ok(),
                bound: bound(&log_w),
                log_q_a: f.example(tape, f.log_q_a, b).to_vec(),
                log_q_z: f.example(tape, f.log_q_z, b).to_vec(),
                log_p_a: f.example(tape, f.log_p_a, b).to_vec(),
                log_p_z: f.example(tape, f.log_p_z, b).to_vec(),
                log_p_x: f.example(tape, f.log_p_x, b).to_vec(),
                noise: SampleNoise {
                    addresses: f.noise.addresses.get(range.clone()).map(<[usize]>::to_vec).unwrap_or_default(),
                    eps: f.noise.eps[range.start * zd..range.end * zd].to_vec(),
                },
                log_w,
            }
        })
        .collect()
}

/// Draws K joint samples for a single example and evaluates the bound.
pub fn multi_sample_bound<M: Model>(
    model: &M,
    mem: Option<&MemoryBuffer>,
    x: &[f64],
    k: usize,
    rng: &mut Rng,
) -> Result<PosteriorSampleSet> {
    let mut tape = Tape::new();
    let params = model.store().bind(&mut tape);
    let m = mem.map(|m| BoundMemory::bind(&mut tape, m));
    let f = model.forward(&mut tape, &params, m, x, 1, k, Noise::Sample(rng))?;
    Ok(sample_sets(&tape, &f).remove(0))
}

/// Σ_b Σ_k [ω_k (log p(x, a_k, z_k) − log q(z_k|a_k, x)) + ω_φ^(k) log q(a_k|x)]
/// with ω and ω_φ held constant. Its gradient is the estimator.
pub fn surrogate(tape: &mut Tape, f: &Forward) -> Result<Var> {
    let n = f.batch * f.k;
    let mut w = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for b in 0..f.batch {
        let log_w = f.example(tape, f.log_w, b);
        w.extend(normalized_weights(log_w));
        if f.posterior.is_some() {
            s.extend(vimco_learning_signal(log_w)?);
        }
    }
    let wv = tape.constant(&[n], w)?;
    let pathwise = tape.add(f.log_w, f.log_q_a)?;
    let weighted = tape.mul(wv, pathwise)?;
    let total = if f.posterior.is_some() {
        let sv = tape.constant(&[n], s)?;
        let score = tape.mul(sv, f.log_q_a)?;
        tape.add(weighted, score)?
    } else {
        weighted
    };
    Ok(tape.sum_all(total)?)
}

/// Batch means of the logged quantities, in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean K-sample bound.
    pub bound: f64,
    pub kl_a: f64,
    pub kl_z: f64,
    /// Mean −log p(x|a, z) over samples.
    pub recon: f64,
    pub loss: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn stats(tape: &Tape, f: &Forward, loss: f64) -> StepStats {
    let bounds: Vec<f64> = (0..f.batch).map(|b| bound(f.example(tape, f.log_w, b))).collect();
    StepStats {
        bound: mean(&bounds),
        kl_a: mean(tape.value(f.kl_a)),
        kl_z: mean(tape.value(f.kl_z)),
        recon: -mean(tape.value(f.log_p_x)),
        loss,
    }
}

/// Backpropagates −surrogate / B, adding parameter gradients to the model's
/// store and, for trainable memory, to the memory entries.
pub fn step_gradients<M: Model>(
    model: &mut M,
    mem: Option<&mut MemoryBuffer>,
    x: &[f64],
    batch: usize,
    k: usize,
    noise: Noise<'_>,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let params = model.store().bind(&mut tape);
    let (f, mem_var) = {
        let bound_mem = mem.as_deref().map(|m| BoundMemory::bind(&mut tape, m));
        let mem_var = bound_mem.map(|m| m.var);
        (model.forward(&mut tape, &params, bound_mem, x, batch, k, noise)?, mem_var)
    };
    let sur = surrogate(&mut tape, &f)?;
    let loss = tape.scale(sur, -1.0 / batch as f64)?;
    let loss_value = tape.item(loss);
    let st = stats(&tape, &f, loss_value);
    tape.backward(loss)?;
    model.store_mut().accumulate_grads(&tape, &params);
    if let (Some(m), Some(v)) = (mem, mem_var) {
        if let Some(g) = tape.grad(v) {
            m.entries_mut().accumulate_grad(g);
        }
    }
    Ok(st)
}

/// Gradients of every parameter leaf of `params`, zeros where none flowed.
pub fn binding_grads(tape: &Tape, store: &ParamStore, params: &Binding) -> Vec<Vec<f64>> {
    (0..store.len())
        .map(|i| {
            let id = crate::tensor::ParamId(i);
            tape.grad(params[id])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.get(id).numel()])
        })
        .collect()
}

/// E[L] over all K-tuples of addresses, weighted by Π_k q(a_k|x), as a tape
/// node. Only defined without continuous latents.
pub fn enumerated_bound(
    tape: &mut Tape,
    params: &Binding,
    model: &MemVae,
    mem: BoundMemory<'_>,
    x: &[f64],
    k: usize,
) -> Result<Var> {
    if model.arch().z_dim != 0 {
        return Err(Error::Invalid("enumeration needs z_dim = 0".into()));
    }
    let slots = mem.buffer.len();
    let tuples = (0..k)
        .try_fold(1usize, |acc, _| acc.checked_mul(slots))
        .filter(|t| *t <= MAX_ENUMERATED_TUPLES)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "{slots}^{k} address tuples exceed the enumeration limit of {MAX_ENUMERATED_TUPLES}"
            ))
        })?;
    let noise = SampleNoise {
        addresses: (0..slots).collect(),
        eps: Vec::new(),
    };
    // one pass with K = |M| scores every address once
    let f = model.forward(tape, params, Some(mem), x, 1, slots, Noise::Replay(&noise))?;
    let mut idx = Vec::with_capacity(tuples * k);
    for t in 0..tuples {
        let mut r = t;
        for _ in 0..k {
            idx.push(r % slots);
            r /= slots;
        }
    }
    let lw = tape.take(f.log_w, &idx)?;
    let lw = tape.reshape(lw, &[tuples, k])?;
    let l = tape.logsumexp(lw, 1)?;
    let c = tape.scalar(-(k as f64).ln());
    let l = tape.add(l, c)?;
    let lq = tape.take(f.log_q_a, &idx)?;
    let lq = tape.reshape(lq, &[tuples, k])?;
    let lq = tape.sum(lq, 1)?;
    let prob = tape.exp(lq)?;
    let terms = tape.mul(prob, l)?;
    Ok(tape.sum_all(terms)?)
}

/// Exact E[L] and its gradient for each parameter (store order).
pub fn enumerate_bound_gradient(
    model: &MemVae,
    mem: &MemoryBuffer,
    x: &[f64],
    k: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = model.store().bind(&mut tape);
    let m = BoundMemory::bind(&mut tape, mem);
    let e = enumerated_bound(&mut tape, &params, model, m, x, k)?;
    tape.backward(e)?;
    Ok((tape.item(e), binding_grads(&tape, model.store(), &params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn learning_signal_cases() {
        let s = vimco_learning_signal(&[0.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| (v + 0.5).abs() < 1e-15));
        for k in 2..10 {
            let s = vimco_learning_signal(&vec![-3.7; k]).unwrap();
            assert!(s.iter().all(|v| (v + 1.0 / k as f64).abs() < 1e-12));
        }
        assert!(vimco_learning_signal(&[1.0]).is_err());
        assert!(vimco_learning_signal(&[]).is_err());
    }

    #[test]
    fn leave_one_out_handles_extreme_spread() {
        // the dominant weight's exclusion must not cancel catastrophically
        let lw = [1000.0, 0.0, -1.0];
        let loo = leave_one_out_lse(&lw);
        assert!((loo[0] - (0f64.exp() + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((loo[1] - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn bound_cases() {
        assert_eq!(bound(&[-2.5]), -2.5);
        assert!((bound(&[-4.0; 7]) + 4.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_and_signals(lw in proptest::collection::vec(-50.0f64..50.0, 2..12), c in -30.0f64..30.0) {
            let w = normalized_weights(&lw);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(w.iter().all(|v| *v >= 0.0));
            let s = vimco_learning_signal(&lw).unwrap();
            let shifted: Vec<f64> = lw.iter().map(|v| v + c).collect();
            let s2 = vimco_learning_signal(&shifted).unwrap();
            for (a, b) in s.iter().zip(&s2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            // direct evaluation of the leave-one-out mean, to compare
            let k = lw.len();
            for i in 0..k {
                let others: Vec<f64> = lw.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                let m = others.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let loo = m + others.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - ((k - 1) as f64).ln();
                prop_assert!((s[i] - (bound(&lw) - loo - w[i])).abs() < 1e-9);
            }
            let mut rev = lw.clone();
            rev.reverse();
            prop_assert!((bound(&rev) - bound(&lw)).abs() < 1e-12);
        }
    }
}
