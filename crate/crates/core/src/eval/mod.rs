//! Evaluation: high-K bounds, memory-size sweeps, posterior inspection,
//! few-shot classification and gradient checks.

pub mod classify;
pub mod gradcheck;
pub mod inspect;
pub mod sweep;

use std::collections::BTreeMap;

use crate::error::Result;
use crate::estimators::bound;
use crate::memory::MemoryBuffer;
use crate::models::{BoundMemory, Model, Noise};
use crate::tensor::Tape;
use crate::Rng;

pub use classify::{fewshot_classify, ClassificationResult, ClassifyRule};
pub use gradcheck::{gradcheck, gradcheck_suite, GradcheckReport};
pub use inspect::{inspect_posterior, PosteriorDump};
pub use sweep::{memory_sweep, SweepRow, SWEEP_HEADER};

/// Examples evaluated per tape, bounding tape size at large K.
const EVAL_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub n: usize,
    /// Mean of −L over examples, in nats.
    pub nll: f64,
    pub stderr: f64,
    pub kl_a: f64,
    pub kl_z: f64,
    /// Mean −log p(x|a, z) over samples.
    pub recon: f64,
    /// Per-example −L, in input order.
    pub per_example: Vec<f64>,
    /// (class, mean −L, count) where labels were given.
    pub per_class: Vec<(usize, f64, usize)>,
}

pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// −L with K posterior samples for each of the `n` rows of `x`.
pub fn eval_nll<M: Model>(
    model: &M,
    mem: Option<&MemoryBuffer>,
    x: &[f64],
    labels: Option<&[usize]>,
    k: usize,
    rng: &mut Rng,
) -> Result<EvalReport> {
    let d = model.arch().x_dim;
    let n = x.len() / d.max(1);
    let mut per_example = Vec::with_capacity(n);
    let (mut kl_a, mut kl_z, mut recon) = (0.0, 0.0, 0.0);
    for chunk in x.chunks(EVAL_CHUNK * d) {
        let b = chunk.len() / d;
        let mut tape = Tape::new();
        let params = model.store().bind(&mut tape);
        let m = mem.map(|m| BoundMemory::bind(&mut tape, m));
        let f = model.forward(&mut tape, &params, m, chunk, b, k, Noise::Sample(rng))?;
        for i in 0..b {
            per_example.push(-bound(f.example(&tape, f.log_w, i)));
        }
        kl_a += tape.value(f.kl_a).iter().sum::<f64>();
        kl_z += tape.value(f.kl_z).iter().sum::<f64>() / k as f64;
        recon -= tape.value(f.log_p_x).iter().sum::<f64>() / k as f64;
    }
    let (nll, stderr) = mean_stderr(&per_example);
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    if let Some(l) = labels {
        for (c, v) in l.iter().zip(&per_example) {
            by_class.entry(*c).or_default().push(*v);
        }
    }
    Ok(EvalReport {
        k,
        n,
        nll,
        stderr,
        kl_a: kl_a / n as f64,
        kl_z: kl_z / n as f64,
        recon: recon / n as f64,
        per_class: by_class
            .into_iter()
            .map(|(c, v)| (c, v.iter().sum::<f64>() / v.len() as f64, v.len()))
            .collect(),
        per_example,
    })
}
