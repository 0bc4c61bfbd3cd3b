//! The memory buffer, its embedding networks, and the addressing
//! distributions p(a) and q(a|x).
//!
//! Similarities between a minibatch of queries and all memory slots are one
//! `[B, e] x [e, |M|]` product against the norm-scaled memory embeddings, so
//! the memory is embedded once per pass and shared by every query and by the
//! prior.

use std::io;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::data::pgm;
use crate::distributions::CategoricalDist;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::tensor::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Rng;

/// Denominator floor for embedding norms.
pub const NORM_FLOOR: f64 = 1e-8;

/// Standard deviation of randomly initialized learned memory.
pub const LEARNED_INIT_STD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    /// ⟨e_a, e_q⟩ / ‖e_a‖
    NormalizedInner,
    Inner,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    Learned,
    Flat,
}

/// The memory matrix M with one entry per row.
#[derive(Debug, Clone)]
pub struct MemoryBuffer {
    entries: Tensor,
    labels: Option<Vec<usize>>,
}

impl MemoryBuffer {
    /// Fixed (non-trainable) memory from raw rows.
    pub fn from_rows(rows: &[Vec<f64>], labels: Option<Vec<usize>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::Invalid("memory needs at least one entry".into()));
        };
        let dim = first.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Invalid(format!(
                "memory row {bad} has {} values, expected {dim}",
                rows[bad].len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(Error::Invalid("one label per memory row required".into()));
            }
        }
        let values = rows.iter().flatten().copied().collect();
        Ok(Self {
            entries: Tensor::new(vec![rows.len(), dim], values)?,
            labels,
        })
    }

    /// Trainable memory initialized from N(0, 0.05²).
    pub fn learned(slots: usize, dim: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, LEARNED_INIT_STD).expect("finite std");
        Self {
            entries: Tensor::from_fn(&[slots, dim], |_| normal.sample(rng)).with_grad(),
            labels: None,
        }
    }

    pub fn from_tensor(entries: Tensor, trainable: bool) -> Result<Self> {
        if entries.shape().len() != 2 || entries.shape()[0] == 0 {
            return Err(Error::Invalid(format!(
                "memory must be a non-empty matrix, got shape {:?}",
                entries.shape()
            )));
        }
        let mut entries = entries;
        entries.set_requires_grad(trainable);
        Ok(Self {
            entries,
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn trainable(&self) -> bool {
        self.entries.requires_grad()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Tensor {
        &mut self.entries
    }

    pub fn row(&self, a: usize) -> &[f64] {
        self.entries.row(a)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Places the entries on the tape; gradients flow only in trainable mode.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        tape.leaf(&self.entries)
    }

    /// Writes the entries as a PGM grid, `cols` tiles per row.
    pub fn write_pgm(&self, path: &Path, side: (usize, usize), cols: usize) -> io::Result<()> {
        let tiles: Vec<Vec<f64>> = (0..self.len())
            .map(|a| {
                let row = self.row(a);
                // learned entries are unconstrained; squash for display
                if self.trainable() {
                    row.iter().map(|v| 1.0 / (1.0 + (-v * 10.0).exp())).collect()
                } else {
                    row.to_vec()
                }
            })
            .collect();
        pgm::write_grid(path, &tiles, side, cols)
    }
}

/// Deterministic read of slot `a` as a `[1, D]` row.
pub fn read(tape: &mut Tape, mem: &MemoryBuffer, mem_var: Var, a: usize) -> Result<Var> {
    if a >= mem.len() {
        return Err(Error::IndexOutOfRange {
            what: "memory address",
            index: a,
            len: mem.len(),
        });
    }
    Ok(tape.select_rows(mem_var, &[a])?)
}

/// The memory embedding h_mem, the query embedding h_query and the prior
/// query point e_p. h_mem is shared by the prior and the posterior.
#[derive(Debug, Clone)]
pub struct EmbeddingNets {
    pub h_mem: Mlp,
    pub h_query: Mlp,
    pub e_prior: ParamId,
    pub dim: usize,
}

impl EmbeddingNets {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let sizes = [input_dim, hidden, dim];
        Self {
            h_mem: Mlp::new(store, &format!("{prefix}.h_mem"), &sizes, activation, rng),
            h_query: Mlp::new(store, &format!("{prefix}.h_query"), &sizes, activation, rng),
            e_prior: store.add(format!("{prefix}.e_prior"), Tensor::zeros(&[dim])),
            dim,
        }
    }

    /// `[|M|, e]` embeddings of every memory row.
    pub fn embed_memory(&self, tape: &mut Tape, params: &Binding, mem: Var) -> Result<Var> {
        self.h_mem.forward(tape, params, mem)
    }

    /// `[B, e]` embeddings of a batch of queries.
    pub fn embed_query(&self, tape: &mut Tape, params: &Binding, x: Var) -> Result<Var> {
        self.h_query.forward(tape, params, x)
    }
}

fn row_norms(tape: &mut Tape, e: Var) -> Result<Var> {
    let rows = tape.shape(e)[0];
    let sq = tape.mul(e, e)?;
    let ss = tape.sum(sq, 1)?;
    let ss = tape.clamp_min(ss, NORM_FLOOR * NORM_FLOOR)?;
    let n = tape.sqrt(ss)?;
    Ok(tape.reshape(n, &[rows, 1])?)
}

/// `[B, |M|]` similarities between query embeddings `[B, e]` and memory
/// embeddings `[|M|, e]`.
pub fn similarity(tape: &mut Tape, e_mem: Var, e_query: Var, kind: SimilarityKind) -> Result<Var> {
    let keys = match kind {
        SimilarityKind::Inner => e_mem,
        SimilarityKind::NormalizedInner | SimilarityKind::Cosine => {
            let n = row_norms(tape, e_mem)?;
            tape.div(e_mem, n)?
        }
    };
    let queries = match kind {
        SimilarityKind::Cosine => {
            let n = row_norms(tape, e_query)?;
            tape.div(e_query, n)?
        }
        _ => e_query,
    };
    let kt = tape.transpose(keys)?;
    Ok(tape.matmul(queries, kt)?)
}

/// Similarity of two plain vectors, for inspection and tests.
pub fn similarity_value(e_a: &[f64], e_q: &[f64], kind: SimilarityKind) -> f64 {
    let dot: f64 = e_a.iter().zip(e_q).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    match kind {
        SimilarityKind::Inner => dot,
        SimilarityKind::NormalizedInner => dot / norm(e_a),
        SimilarityKind::Cosine => dot / (norm(e_a) * norm(e_q)),
    }
}

/// q(a|x) for each row of `x`, given precomputed memory embeddings.
pub fn address_posterior(
    tape: &mut Tape,
    nets: &EmbeddingNets,
    params: &Binding,
    e_mem: Var,
    x: Var,
    kind: SimilarityKind,
) -> Result<CategoricalDist> {
    let e_q = nets.embed_query(tape, params, x)?;
    let logits = similarity(tape, e_mem, e_q, kind)?;
    CategoricalDist::from_logits(tape, logits)
}

/// p(a): similarity to the learned query point, or uniform.
pub fn address_prior(
    tape: &mut Tape,
    nets: &EmbeddingNets,
    params: &Binding,
    e_mem: Var,
    mode: PriorMode,
    kind: SimilarityKind,
) -> Result<CategoricalDist> {
    let slots = tape.shape(e_mem)[0];
    match mode {
        PriorMode::Flat => CategoricalDist::uniform(tape, slots),
        PriorMode::Learned => {
            let q = tape.reshape(params[nets.e_prior], &[1, nets.dim])?;
            let s = similarity(tape, e_mem, q, kind)?;
            let logits = tape.reshape(s, &[slots])?;
            CategoricalDist::from_logits(tape, logits)
        }
    }
}

/// p(a) and q(a|x) over the same slots.
#[derive(Debug, Clone, Copy)]
pub struct AddressDistPair {
    pub prior: CategoricalDist,
    pub posterior: CategoricalDist,
}

impl AddressDistPair {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        tape: &mut Tape,
        nets: &EmbeddingNets,
        params: &Binding,
        mem: Var,
        x: Var,
        mode: PriorMode,
        kind: SimilarityKind,
    ) -> Result<Self> {
        let e_mem = nets.embed_memory(tape, params, mem)?;
        let prior = address_prior(tape, nets, params, e_mem, mode, kind)?;
        let posterior = address_posterior(tape, nets, params, e_mem, x, kind)?;
        Ok(Self { prior, posterior })
    }
}
