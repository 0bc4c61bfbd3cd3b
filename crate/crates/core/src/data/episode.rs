//! Few-shot episodes and held-out evaluation memories.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};

use super::{DataError, Dataset};
use crate::memory::MemoryBuffer;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_classes: usize,
    pub targets_per_class: usize,
    pub mem_per_class: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            targets_per_class: 4,
            mem_per_class: 1,
        }
    }
}

/// Dataset indices for one training unit. Memory and target index sets are
/// disjoint and share classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub memory_indices: Vec<usize>,
    pub memory_labels: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub target_labels: Vec<usize>,
}

impl Episode {
    pub fn memory(&self, ds: &Dataset) -> MemoryBuffer {
        let rows: Vec<Vec<f64>> = self.memory_indices.iter().map(|&i| ds.image(i).to_vec()).collect();
        MemoryBuffer::from_rows(&rows, Some(self.memory_labels.clone())).expect("episode memory is non-empty")
    }

    pub fn targets(&self, ds: &Dataset) -> Vec<f64> {
        ds.gather(&self.target_indices)
    }
}

/// Draws `n_classes` distinct classes, then disjoint targets and memory
/// examples from each.
pub fn sample_episode(ds: &Dataset, spec: &EpisodeSpec, rng: &mut Rng) -> Result<Episode, DataError> {
    let groups = ds.by_class();
    if groups.len() < spec.n_classes {
        return Err(DataError::Insufficient(format!(
            "{} classes available, episode needs {}",
            groups.len(),
            spec.n_classes
        )));
    }
    let keys: Vec<usize> = groups.keys().copied().collect();
    let classes: Vec<usize> = keys.choose_multiple(rng, spec.n_classes).copied().collect();
    let need = spec.targets_per_class + spec.mem_per_class;
    let mut ep = Episode {
        classes: classes.clone(),
        memory_indices: Vec::new(),
        memory_labels: Vec::new(),
        target_indices: Vec::new(),
        target_labels: Vec::new(),
    };
    for &c in &classes {
        let members = &groups[&c];
        if members.len() < need {
            return Err(DataError::ClassTooSmall {
                class: c,
                have: members.len(),
                need,
            });
        }
        let picked: Vec<usize> = members.choose_multiple(rng, need).copied().collect();
        let (t, m) = picked.split_at(spec.targets_per_class);
        ep.target_indices.extend_from_slice(t);
        ep.target_labels.extend(std::iter::repeat_n(c, t.len()));
        ep.memory_indices.extend_from_slice(m);
        ep.memory_labels.extend(std::iter::repeat_n(c, m.len()));
    }
    Ok(ep)
}

/// An evaluation memory and the dataset rows it was built from.
#[derive(Debug, Clone)]
pub struct SweepMemory {
    pub memory: MemoryBuffer,
    pub indices: Vec<usize>,
    pub classes: Vec<usize>,
}

/// `per_class` examples of each listed class, never using an index in `exclude`.
pub fn memory_from_classes(
    ds: &Dataset,
    classes: &[usize],
    per_class: usize,
    exclude: &HashSet<usize>,
    rng: &mut Rng,
) -> Result<SweepMemory, DataError> {
    let groups = ds.by_class();
    let mut indices = Vec::with_capacity(classes.len() * per_class);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let pool: Vec<usize> = groups
            .get(&c)
            .map(|m| m.iter().copied().filter(|i| !exclude.contains(i)).collect())
            .unwrap_or_default();
        if pool.len() < per_class {
            return Err(DataError::ClassTooSmall {
                class: c,
                have: pool.len(),
                need: per_class,
            });
        }
        indices.extend(pool.choose_multiple(rng, per_class).copied());
        labels.extend(std::iter::repeat_n(c, per_class));
    }
    if indices.is_empty() {
        return Err(DataError::Insufficient("evaluation memory would be empty".into()));
    }
    let rows: Vec<Vec<f64>> = indices.iter().map(|&i| ds.image(i).to_vec()).collect();
    let memory = MemoryBuffer::from_rows(&rows, Some(labels)).expect("non-empty rows");
    Ok(SweepMemory {
        memory,
        indices,
        classes: classes.to_vec(),
    })
}

/// A memory of `n_classes × per_class` held-out examples from randomly
/// chosen classes, excluding the evaluation targets.
pub fn test_memory_sweep(
    ds: &Dataset,
    n_classes: usize,
    per_class: usize,
    exclude: &HashSet<usize>,
    rng: &mut Rng,
) -> Result<SweepMemory, DataError> {
    let groups = ds.by_class();
    let mut eligible: Vec<usize> = groups
        .iter()
        .filter(|(_, m)| m.iter().filter(|i| !exclude.contains(i)).count() >= per_class)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < n_classes {
        return Err(DataError::Insufficient(format!(
            "{} classes have {per_class} free examples, sweep needs {n_classes}",
            eligible.len()
        )));
    }
    eligible.shuffle(rng);
    eligible.truncate(n_classes);
    eligible.sort_unstable();
    memory_from_classes(ds, &eligible, per_class, exclude, rng)
}
