//! Test-time memory-size sweeps over held-out classes.

use std::collections::HashSet;
use std::io;

use rand::seq::IndexedRandom;

use super::{eval_nll, mean_stderr};
use crate::data::episode::memory_from_classes;
use crate::data::{DataError, Dataset};
use crate::error::Result;
use crate::models::Model;
use crate::Rng;

pub const SWEEP_HEADER: [&str; 7] = ["C", "N", "nll", "stderr", "kl_a", "kl_z", "ref_logC"];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub c: usize,
    pub n: usize,
    pub nll: f64,
    pub stderr: f64,
    pub kl_a: f64,
    pub kl_z: f64,
    /// nll at the smallest C for this N, plus log(C / C_min).
    pub ref_log_c: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Dataset indices of the evaluation targets.
    pub targets: Vec<usize>,
    /// Dataset indices of every memory built, for leakage audits.
    pub memory_indices: Vec<Vec<usize>>,
}

/// Picks `max(C)` held-out classes and `targets_per_class` targets from each.
/// For class i and each (C, N), the memory holds N examples of each of the
/// classes i, i+1, …, i+C−1 (cyclically), so every C is evaluated on the same
/// targets and each memory contains the target's class. Targets never enter
/// any memory.
#[allow(clippy::too_many_arguments)]
pub fn memory_sweep<M: Model>(
    model: &M,
    ds: &Dataset,
    c_list: &[usize],
    n_list: &[usize],
    targets_per_class: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<SweepResult> {
    let max_c = c_list.iter().copied().max().unwrap_or(1);
    let groups = ds.by_class();
    let max_n = n_list.iter().copied().max().unwrap_or(1);
    let eligible: Vec<usize> = groups
        .iter()
        .filter(|(_, m)| m.len() >= targets_per_class + max_n)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < max_c {
        return Err(DataError::Insufficient(format!(
            "{} classes have {} examples, sweep needs {max_c}",
            eligible.len(),
            targets_per_class + max_n
        ))
        .into());
    }
    let classes: Vec<usize> = eligible.choose_multiple(rng, max_c).copied().collect();
    let targets_by_class: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| groups[c].choose_multiple(rng, targets_per_class).copied().collect())
        .collect();
    let targets: Vec<usize> = targets_by_class.iter().flatten().copied().collect();
    let exclude: HashSet<usize> = targets.iter().copied().collect();

    let mut rows = Vec::new();
    let mut memory_indices = Vec::new();
    for &n in n_list {
        let mut base: Option<(usize, f64)> = None;
        let mut cs = c_list.to_vec();
        cs.sort_unstable();
        for c in cs {
            let mut per_example = Vec::new();
            let (mut kl_a, mut kl_z) = (0.0, 0.0);
            for (i, tidx) in targets_by_class.iter().enumerate() {
                let window: Vec<usize> = (0..c).map(|j| classes[(i + j) % max_c]).collect();
                let sm = memory_from_classes(ds, &window, n, &exclude, rng)?;
                memory_indices.push(sm.indices.clone());
                let x = ds.gather(tidx);
                let r = eval_nll(model, Some(&sm.memory), &x, None, k, rng)?;
                kl_a += r.kl_a * r.n as f64;
                kl_z += r.kl_z * r.n as f64;
                per_example.extend(r.per_example);
            }
            let (nll, stderr) = mean_stderr(&per_example);
            let total = per_example.len() as f64;
            let (c0, nll0) = *base.get_or_insert((c, nll));
            rows.push(SweepRow {
                c,
                n,
                nll,
                stderr,
                kl_a: kl_a / total,
                kl_z: kl_z / total,
                ref_log_c: nll0 + (c as f64 / c0 as f64).ln(),
            });
        }
    }
    Ok(SweepResult {
        rows,
        targets,
        memory_indices,
    })
}

pub fn write_sweep_csv<W: io::Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| crate::Error::Io(io::Error::other(e));
    w.write_record(SWEEP_HEADER).map_err(io_err)?;
    for r in rows {
        w.write_record([
            r.c.to_string(),
            r.n.to_string(),
            r.nll.to_string(),
            r.stderr.to_string(),
            r.kl_a.to_string(),
            r.kl_z.to_string(),
            r.ref_log_c.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: io::Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |msg: String| crate::Error::Invalid(format!("sweep csv: {msg}"));
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.iter().ne(SWEEP_HEADER) {
        return Err(bad(format!("unexpected header {headers:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(e.to_string()));
            let u = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(e.to_string()));
            Ok(SweepRow {
                c: u(0)?,
                n: u(1)?,
                nll: f(2)?,
                stderr: f(3)?,
                kl_a: f(4)?,
                kl_z: f(5)?,
                ref_log_c: f(6)?,
            })
        })
        .collect()
}
