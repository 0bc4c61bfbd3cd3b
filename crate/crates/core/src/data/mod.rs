//! Datasets of binary images, their file formats, and few-shot episodes.

pub mod episode;
pub mod idx;
pub mod pgm;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::Rng;

pub use episode::{sample_episode, test_memory_sweep, Episode, EpisodeSpec, SweepMemory};
pub use synth::{synth_pattern_corpus, SynthSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("{0}")]
    Format(String),
    #[error("class {class} has {have} examples, needs {need}")]
    ClassTooSmall { class: usize, have: usize, need: usize },
    #[error("not enough data: {0}")]
    Insufficient(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Binarize {
    Threshold,
    Stochastic,
}

/// Pixels ≥ 0.5 become 1 in threshold mode; stochastic mode draws
/// Bernoulli(pixel) for each pixel.
pub fn binarize(pixels: &[f64], mode: Binarize, rng: &mut Rng) -> Vec<f64> {
    match mode {
        Binarize::Threshold => pixels.iter().map(|&p| f64::from(u8::from(p >= 0.5))).collect(),
        Binarize::Stochastic => pixels
            .iter()
            .map(|&p| f64::from(u8::from(rng.random::<f64>() < p)))
            .collect(),
    }
}

/// Binary images of a fixed size, optionally labeled by class.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f64>,
    dim: usize,
    side: (usize, usize),
    class_ids: Option<Vec<usize>>,
    split: Split,
}

impl Dataset {
    /// `side` is (width, height) and must multiply to the image size.
    pub fn new(
        pixels: Vec<f64>,
        side: (usize, usize),
        class_ids: Option<Vec<usize>>,
        split: Split,
    ) -> Result<Self, DataError> {
        let dim = side.0 * side.1;
        if dim == 0 || !pixels.len().is_multiple_of(dim) {
            return Err(DataError::Format(format!(
                "{} pixels do not split into {}x{} images",
                pixels.len(),
                side.0,
                side.1
            )));
        }
        if let Some(i) = pixels.iter().position(|p| *p != 0.0 && *p != 1.0) {
            return Err(DataError::Format(format!(
                "pixel {i} is {}, expected 0 or 1",
                pixels[i]
            )));
        }
        let n = pixels.len() / dim;
        if let Some(ids) = &class_ids {
            if ids.len() != n {
                return Err(DataError::Format(format!("{} labels for {n} images", ids.len())));
            }
        }
        Ok(Self {
            pixels,
            dim,
            side,
            class_ids,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> (usize, usize) {
        self.side
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.dim..(i + 1) * self.dim]
    }

    pub fn images(&self) -> impl Iterator<Item = &[f64]> {
        self.pixels.chunks_exact(self.dim)
    }

    pub fn class_ids(&self) -> Option<&[usize]> {
        self.class_ids.as_deref()
    }

    pub fn class_of(&self, i: usize) -> Option<usize> {
        self.class_ids.as_ref().map(|c| c[i])
    }

    /// Image indices grouped by class, in ascending class order.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        if let Some(ids) = &self.class_ids {
            for (i, c) in ids.iter().enumerate() {
                out.entry(*c).or_default().push(i);
            }
        }
        out
    }

    /// Rows `idx` concatenated, for building a batch.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|&i| self.image(i).iter().copied()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            pixels: self.gather(idx),
            dim: self.dim,
            side: self.side,
            class_ids: self.class_ids.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
            split: self.split,
        }
    }
}

/// Loads IDX image and optional label files, binarizing the images.
pub fn load_idx_dataset(
    images: &Path,
    labels: Option<&Path>,
    split: Split,
    mode: Binarize,
    rng: &mut Rng,
) -> Result<Dataset, DataError> {
    let arr = idx::read_idx(images)?;
    if arr.dims.len() != 3 {
        return Err(DataError::Format(format!("expected rank-3 images, got rank {}", arr.dims.len())));
    }
    let (unit, _) = arr.as_unit_images()?;
    let class_ids = labels.map(|p| idx::read_idx(p)?.as_labels()).transpose()?;
    Dataset::new(binarize(&unit, mode, rng), (arr.dims[2], arr.dims[1]), class_ids, split)
}

/// Max-pools a `width × height` image by `factor`, dropping ragged edges.
pub fn max_pool(pixels: &[f64], width: usize, height: usize, factor: usize) -> (Vec<f64>, usize, usize) {
    let (w, h) = (width / factor, height / factor);
    let mut out = vec![f64::NEG_INFINITY; w * h];
    for y in 0..h * factor {
        for x in 0..w * factor {
            let o = &mut out[(y / factor) * w + x / factor];
            *o = o.max(pixels[y * width + x]);
        }
    }
    (out, w, h)
}

/// Loads a tree with one directory per class holding PGM images. Classes are
/// numbered in sorted directory order. Images are optionally inverted (dark
/// strokes on white become 1s), max-pooled by `pool`, then thresholded.
pub fn load_class_dirs(root: &Path, pool: usize, invert: bool, split: Split) -> Result<Dataset, DataError> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    let mut pixels = Vec::new();
    let mut ids = Vec::new();
    let mut side = None;
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        files.sort();
        for f in files {
            let img = pgm::read_pgm(&f)?;
            let px: Vec<f64> = if invert {
                img.pixels.iter().map(|v| 1.0 - v).collect()
            } else {
                img.pixels
            };
            let (pooled, w, h) = max_pool(&px, img.width, img.height, pool.max(1));
            match side {
                None => side = Some((w, h)),
                Some(s) if s != (w, h) => {
                    return Err(DataError::Format(format!(
                        "{} pools to {w}x{h}, expected {}x{}",
                        f.display(),
                        s.0,
                        s.1
                    )))
                }
                _ => {}
            }
            pixels.extend(pooled.iter().map(|&p| f64::from(u8::from(p >= 0.5))));
            ids.push(class);
        }
    }
    let side = side.ok_or_else(|| DataError::Insufficient(format!("no images under {}", root.display())))?;
    Dataset::new(pixels, side, Some(ids), split)
}
