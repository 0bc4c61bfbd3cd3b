//! Central-difference checks of tape gradients.

use crate::error::Result;
use crate::estimators::enumerated_bound;
use crate::memory::MemoryBuffer;
use crate::nn::Activation;
use crate::models::{Arch, BaselineVae, BoundMemory, MemVae, Model, Noise, SampleNoise, SoftAttention};
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Rng;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }

    pub fn merge(self, other: Self) -> Self {
        let checked = self.checked + other.checked;
        let mut worst = if other.max_rel_err > self.max_rel_err { other } else { self };
        worst.checked = checked;
        worst
    }
}

/// Denominator floor for relative errors. Below it the check is effectively
/// absolute, since central differences carry ~1e-10 of roundoff.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares backpropagated gradients of the scalar built by `objective`
/// with central differences, for every parameter in `store` and, if given,
/// every element of `extra` (checked under the name `extra_name`).
pub fn check_gradients(
    store: &ParamStore,
    extra: Option<(&str, &Tensor)>,
    tolerance: f64,
    objective: impl Fn(&mut Tape, &Binding, Option<Var>) -> Result<Var>,
) -> Result<GradcheckReport> {
    let eval = |store: &ParamStore, extra: Option<&Tensor>| -> Result<f64> {
        let mut tape = Tape::new();
        let params = store.bind(&mut tape);
        let ev = extra.map(|t| tape.leaf(t));
        let f = objective(&mut tape, &params, ev)?;
        Ok(tape.item(f))
    };
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let extra_t = extra.map(|(_, t)| t.clone().with_grad());
    let ev = extra_t.as_ref().map(|t| tape.leaf(t));
    let f = objective(&mut tape, &params, ev)?;
    tape.backward(f)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tolerance,
    };
    let mut record = |name: &str, i: usize, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = e;
            report.worst_param = name.to_string();
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    };

    let mut work = store.clone();
    for p in 0..store.len() {
        let id = ParamId(p);
        let analytic = tape
            .grad(params[id])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + FD_STEP;
            let up = eval(&work, extra_t.as_ref())?;
            work.get_mut(id).values_mut()[i] = orig - FD_STEP;
            let down = eval(&work, extra_t.as_ref())?;
            work.get_mut(id).values_mut()[i] = orig;
            record(store.name(id), i, analytic[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    if let (Some((name, _)), Some(t), Some(v)) = (extra, &extra_t, ev) {
        let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut work_t = t.clone();
        for i in 0..t.numel() {
            let orig = t.values()[i];
            work_t.values_mut()[i] = orig + FD_STEP;
            let up = eval(store, Some(&work_t))?;
            work_t.values_mut()[i] = orig - FD_STEP;
            let down = eval(store, Some(&work_t))?;
            work_t.values_mut()[i] = orig;
            record(name, i, analytic[i], (up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(report)
}

/// Checks Σ_b [log (1/K) Σ_k ω̃_bk] + Σ c_bk log q(a_bk|x) with the sampled
/// addresses and latent noise frozen. The fixed random coefficients c stand in
/// for learning signals so the address-posterior path is exercised.
#[allow(clippy::too_many_arguments)]
pub fn gradcheck<M: Model>(
    model: &M,
    mem: Option<&MemoryBuffer>,
    x: &[f64],
    batch: usize,
    k: usize,
    tolerance: f64,
    rng: &mut Rng,
) -> Result<GradcheckReport> {
    use rand::Rng as _;
    let noise: SampleNoise = {
        let mut tape = Tape::new();
        let params = model.store().bind(&mut tape);
        let m = mem.map(|m| BoundMemory::bind(&mut tape, m));
        model.forward(&mut tape, &params, m, x, batch, k, Noise::Sample(rng))?.noise
    };
    let coeffs: Vec<f64> = (0..batch * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let trainable = mem.filter(|m| m.trainable());
    let objective = |tape: &mut Tape, params: &Binding, mem_var: Option<Var>| -> Result<Var> {
        let m = mem.map(|buffer| BoundMemory {
            buffer,
            var: mem_var.unwrap_or_else(|| buffer.bind(tape)),
        });
        let f = model.forward(tape, params, m, x, batch, k, Noise::Replay(&noise))?;
        let lw = tape.reshape(f.log_w, &[batch, k])?;
        let l = tape.logsumexp(lw, 1)?;
        let l = tape.sum_all(l)?;
        let c = tape.constant(&[batch * k], coeffs.clone())?;
        let s = tape.mul(c, f.log_q_a)?;
        let s = tape.sum_all(s)?;
        Ok(tape.add(l, s)?)
    };
    check_gradients(
        model.store(),
        trainable.map(|m| (crate::training::MEMORY_PARAM, m.entries())),
        tolerance,
        objective,
    )
}

/// Checks the gradient of the enumerated expectation E[L] (z_dim = 0 only).
pub fn gradcheck_enumerated(
    model: &MemVae,
    mem: &MemoryBuffer,
    x: &[f64],
    k: usize,
    tolerance: f64,
) -> Result<GradcheckReport> {
    check_gradients(model.store(), None, tolerance, |tape, params, _| {
        let m = BoundMemory::bind(tape, mem);
        enumerated_bound(tape, params, model, m, x, k)
    })
}

/// Network sizes for the gradient-check suite, well under 10³ parameters.
/// Tanh keeps the objective smooth; with ReLU a central difference can
/// straddle a kink, or a fully dead embedding layer can sit on the norm floor.
pub fn tiny_arch(x_dim: usize, z_dim: usize) -> Arch {
    Arch {
        x_dim,
        z_dim,
        enc_hidden: vec![5],
        dec_hidden: vec![5],
        prior_hidden: vec![4],
        embed_hidden: 5,
        embed_dim: 3,
        activation: Activation::Tanh,
        ..Arch::desk(x_dim)
    }
}

fn random_bits(n: usize, rng: &mut Rng) -> Vec<f64> {
    use rand::Rng as _;
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect()
}

/// Checks the hard-attention model with fixed and learned memory, the
/// baseline VAE, the soft-attention model, and the enumerated bound of a
/// z_dim = 0 hard model. Returns one named report per check.
pub fn gradcheck_suite(tolerance: f64, rng: &mut Rng) -> Result<Vec<(String, usize, GradcheckReport)>> {
    const X: usize = 6;
    const SLOTS: usize = 3;
    const BATCH: usize = 2;
    const K: usize = 3;
    let x = random_bits(BATCH * X, rng);
    // a blank row embeds to exactly zero, where the key normalization has a kink
    let rows: Vec<Vec<f64>> = (0..SLOTS)
        .map(|_| loop {
            let r = random_bits(X, rng);
            if r.contains(&1.0) {
                break r;
            }
        })
        .collect();
    let mem = MemoryBuffer::from_rows(&rows, None)?;
    let mut out = Vec::new();

    let hard = MemVae::new(tiny_arch(X, 2), rng);
    let n = hard.store().num_scalars();
    out.push(("hard".to_string(), n, gradcheck(&hard, Some(&mem), &x, BATCH, K, tolerance, rng)?));
    // trainable, but started away from the origin like the fixed memory
    let learned = MemoryBuffer::from_tensor(mem.entries().clone(), true)?;
    let r = gradcheck(&hard, Some(&learned), &x, BATCH, K, tolerance, rng)?;
    out.push(("hard+learned_memory".to_string(), n + learned.entries().numel(), r));

    let vae = BaselineVae::new(tiny_arch(X, 2), rng)?;
    let n = vae.store().num_scalars();
    out.push(("vae".to_string(), n, gradcheck(&vae, None, &x, BATCH, K, tolerance, rng)?));

    let soft = SoftAttention::new(tiny_arch(X, 2), rng)?;
    let n = soft.store().num_scalars();
    out.push(("soft".to_string(), n, gradcheck(&soft, Some(&mem), &x, BATCH, K, tolerance, rng)?));

    let discrete = MemVae::new(tiny_arch(X, 0), rng);
    let n = discrete.store().num_scalars();
    let r = gradcheck_enumerated(&discrete, &mem, &x[..X], 2, tolerance)?;
    out.push(("hard_enumerated".to_string(), n, r));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn suite_passes_on_fresh_models() {
        let mut rng = rng_from_seed(3);
        for (name, params, r) in gradcheck_suite(1e-4, &mut rng).unwrap() {
            assert!(params <= 1000, "{name}: {params} parameters");
            assert!(r.passed(), "{name}: {r:?}");
            assert!(r.checked >= params);
        }
    }
}
