//! Few-shot classification by addressing labeled memory.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::estimators::normalized_weights;
use crate::memory::MemoryBuffer;
use crate::models::{BoundMemory, MemVae, Model, Noise};
use crate::tensor::Tape;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifyRule {
    /// p(c|x) ∝ Σ_{a: label c} q(a|x).
    Feedforward,
    /// p(c|x) ∝ Σ_k ω_k [label(a_k) = c] over K posterior samples.
    Weighted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub way: usize,
    pub shot: usize,
    pub accuracy: f64,
    pub rule: ClassifyRule,
    pub predictions: Vec<usize>,
}

/// The label with the highest score; the lowest label wins ties.
pub fn argmax_label(scores: &BTreeMap<usize, f64>) -> usize {
    let mut best = None::<(usize, f64)>;
    for (&label, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    best.map(|(l, _)| l).expect("at least one label")
}

/// Label scores for each query.
pub fn label_scores(
    model: &MemVae,
    mem: &MemoryBuffer,
    x: &[f64],
    rule: ClassifyRule,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<BTreeMap<usize, f64>>> {
    let labels = mem
        .labels()
        .ok_or_else(|| Error::Invalid("classification needs labeled memory".into()))?;
    let d = model.arch().x_dim;
    let n = x.len() / d;
    let empty: BTreeMap<usize, f64> = labels.iter().map(|l| (*l, 0.0)).collect();
    match rule {
        ClassifyRule::Feedforward => {
            let probs = model.address_posterior_probs(mem, x, n)?;
            Ok(probs
                .iter()
                .map(|p| {
                    let mut s = empty.clone();
                    for (a, pa) in p.iter().enumerate() {
                        *s.get_mut(&labels[a]).unwrap() += pa;
                    }
                    s
                })
                .collect())
        }
        ClassifyRule::Weighted => {
            let mut tape = Tape::new();
            let params = model.store().bind(&mut tape);
            let m = BoundMemory::bind(&mut tape, mem);
            let f = model.forward(&mut tape, &params, Some(m), x, n, k, Noise::Sample(rng))?;
            Ok((0..n)
                .map(|b| {
                    let w = normalized_weights(f.example(&tape, f.log_w, b));
                    let mut s = empty.clone();
                    for (j, wk) in w.iter().enumerate() {
                        *s.get_mut(&labels[f.noise.addresses[b * k + j]]).unwrap() += wk;
                    }
                    s
                })
                .collect())
        }
    }
}

pub fn fewshot_classify(
    model: &MemVae,
    mem: &MemoryBuffer,
    x: &[f64],
    truth: &[usize],
    rule: ClassifyRule,
    k: usize,
    rng: &mut Rng,
) -> Result<ClassificationResult> {
    let scores = label_scores(model, mem, x, rule, k, rng)?;
    if scores.len() != truth.len() {
        return Err(Error::Invalid(format!("{} queries but {} labels", scores.len(), truth.len())));
    }
    let predictions: Vec<usize> = scores.iter().map(argmax_label).collect();
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    let labels = mem.labels().unwrap_or(&[]);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_default() += 1;
    }
    Ok(ClassificationResult {
        way: counts.len(),
        shot: counts.values().copied().min().unwrap_or(0),
        accuracy: correct as f64 / truth.len().max(1) as f64,
        rule,
        predictions,
    })
}
