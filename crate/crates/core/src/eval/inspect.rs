//! Dumps of q(a|x) for a single target.

use std::io;
use std::path::Path;

use crate::data::pgm;
use crate::error::Result;
use crate::memory::MemoryBuffer;
use crate::models::MemVae;

pub const HISTOGRAM_HEADER: [&str; 3] = ["slot", "prob", "class_id"];

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDump {
    pub probs: Vec<f64>,
    /// The `top_n` most probable slots, most probable first (ties by slot).
    pub top: Vec<(usize, f64)>,
}

pub fn inspect_posterior(model: &MemVae, mem: &MemoryBuffer, x: &[f64], top_n: usize) -> Result<PosteriorDump> {
    let probs = model.address_posterior_probs(mem, x, 1)?.remove(0);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let top = order.iter().take(top_n).map(|&a| (a, probs[a])).collect();
    Ok(PosteriorDump { probs, top })
}

/// The histogram as CSV; `class_id` is empty for unlabeled memory.
pub fn write_histogram<W: io::Write>(out: W, dump: &PosteriorDump, labels: Option<&[usize]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io_err = |e: csv::Error| crate::Error::Io(io::Error::other(e));
    w.write_record(HISTOGRAM_HEADER).map_err(io_err)?;
    for (a, p) in dump.probs.iter().enumerate() {
        let class = labels.map(|l| l[a].to_string()).unwrap_or_default();
        w.write_record([a.to_string(), p.to_string(), class]).map_err(io_err)?;
    }
    w.flush()?;
    Ok(())
}

/// The target followed by its top memory entries, in one row.
pub fn write_strip(path: &Path, dump: &PosteriorDump, mem: &MemoryBuffer, x: &[f64], side: (usize, usize)) -> io::Result<()> {
    let mut tiles = vec![x.to_vec()];
    tiles.extend(dump.top.iter().map(|(a, _)| mem.row(*a).to_vec()));
    let n = tiles.len();
    pgm::write_grid(path, &tiles, side, n)
}
