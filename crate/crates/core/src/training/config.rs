//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::ConfigError;
use crate::data::Binarize;
use crate::memory::{PriorMode, SimilarityKind};
use crate::models::Arch;
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Hard,
    Vae,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Fresh memory from the training data every step; targets are copies of
    /// memory rows.
    Recall,
    FewShot,
    LearnedMemory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synth,
    Idx { images: PathBuf, labels: Option<PathBuf> },
    Dirs { root: PathBuf, pool: usize, invert: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub mode: TrainMode,
    pub lr: f64,
    pub k: usize,
    pub batch: usize,
    pub memory_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Record real step times; off keeps metrics files reproducible.
    pub log_wall_ms: bool,
    pub arch: Arch,
    pub episode_classes: usize,
    pub targets_per_class: usize,
    pub mem_per_class: usize,
    pub eval_k: usize,
    pub data: DataSource,
    pub test_data: Option<DataSource>,
    pub binarize: Binarize,
    pub data_seed: u64,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_width: usize,
    pub synth_height: usize,
    pub synth_flip: f64,
    pub synth_density: f64,
    pub synth_test_classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Hard,
            mode: TrainMode::FewShot,
            lr: 3e-4,
            k: 4,
            batch: 32,
            memory_size: 16,
            weight_decay: 0.0,
            grad_clip: 0.0,
            steps: 1000,
            seed: 0,
            log_every: 100,
            log_wall_ms: false,
            arch: Arch::desk(64),
            episode_classes: 8,
            targets_per_class: 4,
            mem_per_class: 1,
            eval_k: 100,
            data: DataSource::Synth,
            test_data: None,
            binarize: Binarize::Threshold,
            data_seed: 1,
            synth_classes: 64,
            synth_per_class: 20,
            synth_width: 8,
            synth_height: 8,
            synth_flip: 0.05,
            synth_density: 0.5,
            synth_test_classes: 32,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim(), line)).collect()
}

fn parse_enum<T: Copy>(key: &str, value: &str, line: usize, options: &[(&str, T)]) -> Result<T, ConfigError> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
        })
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

const MODELS: &[(&str, ModelKind)] = &[("hard", ModelKind::Hard), ("vae", ModelKind::Vae), ("soft", ModelKind::Soft)];
const MODES: &[(&str, TrainMode)] = &[
    ("recall", TrainMode::Recall),
    ("few_shot", TrainMode::FewShot),
    ("learned_memory", TrainMode::LearnedMemory),
];
const PRIORS: &[(&str, PriorMode)] = &[("learned", PriorMode::Learned), ("flat", PriorMode::Flat)];
const SIMILARITIES: &[(&str, SimilarityKind)] = &[
    ("normalized_inner", SimilarityKind::NormalizedInner),
    ("inner", SimilarityKind::Inner),
    ("cosine", SimilarityKind::Cosine),
];
const ACTIVATIONS: &[(&str, Activation)] = &[("relu", Activation::Relu), ("tanh", Activation::Tanh)];
const BINARIZE: &[(&str, Binarize)] = &[("threshold", Binarize::Threshold), ("stochastic", Binarize::Stochastic)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|(_, o)| *o == v).map(|(n, _)| *n).unwrap_or("?")
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut raw: Vec<(usize, String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
                line: line_no,
                msg: "expected key = value".into(),
            })?;
            raw.push((line_no, k.trim().to_string(), v.trim().to_string()));
        }
        let mut x_dim_set = false;
        let (mut data_kind, mut test_kind) = (String::from("synth"), None::<String>);
        let (mut idx_images, mut idx_labels, mut test_idx_images, mut test_idx_labels) = (None, None, None, None);
        let (mut data_dir, mut test_data_dir, mut pool, mut invert) = (None, None, 1usize, false);
        for (line, key, value) in &raw {
            let (line, v) = (*line, value.as_str());
            match key.as_str() {
                "model" => c.model = parse_enum(key, v, line, MODELS)?,
                "mode" => c.mode = parse_enum(key, v, line, MODES)?,
                "lr" => c.lr = parse(key, v, line)?,
                "k" => c.k = parse(key, v, line)?,
                "batch" => c.batch = parse(key, v, line)?,
                "memory_size" => c.memory_size = parse(key, v, line)?,
                "weight_decay" => c.weight_decay = parse(key, v, line)?,
                "grad_clip" => c.grad_clip = parse(key, v, line)?,
                "steps" => c.steps = parse(key, v, line)?,
                "seed" => c.seed = parse(key, v, line)?,
                "log_every" => c.log_every = parse(key, v, line)?,
                "log_wall_ms" => c.log_wall_ms = parse(key, v, line)?,
                "x_dim" => {
                    c.arch.x_dim = parse(key, v, line)?;
                    x_dim_set = true;
                }
                "z_dim" => c.arch.z_dim = parse(key, v, line)?,
                "enc_hidden" => c.arch.enc_hidden = parse_list(key, v, line)?,
                "dec_hidden" => c.arch.dec_hidden = parse_list(key, v, line)?,
                "prior_hidden" => c.arch.prior_hidden = parse_list(key, v, line)?,
                "embed_hidden" => c.arch.embed_hidden = parse(key, v, line)?,
                "embed_dim" => c.arch.embed_dim = parse(key, v, line)?,
                "similarity" => c.arch.similarity = parse_enum(key, v, line, SIMILARITIES)?,
                "prior" => c.arch.prior_mode = parse_enum(key, v, line, PRIORS)?,
                "activation" => c.arch.activation = parse_enum(key, v, line, ACTIVATIONS)?,
                "episode_classes" => c.episode_classes = parse(key, v, line)?,
                "targets_per_class" => c.targets_per_class = parse(key, v, line)?,
                "mem_per_class" => c.mem_per_class = parse(key, v, line)?,
                "eval_k" => c.eval_k = parse(key, v, line)?,
                "binarize" => c.binarize = parse_enum(key, v, line, BINARIZE)?,
                "data" => data_kind = v.to_string(),
                "test_data" => test_kind = Some(v.to_string()),
                "idx_images" => idx_images = Some(PathBuf::from(v)),
                "idx_labels" => idx_labels = Some(PathBuf::from(v)),
                "test_idx_images" => test_idx_images = Some(PathBuf::from(v)),
                "test_idx_labels" => test_idx_labels = Some(PathBuf::from(v)),
                "data_dir" => data_dir = Some(PathBuf::from(v)),
                "test_data_dir" => test_data_dir = Some(PathBuf::from(v)),
                "pool" => pool = parse(key, v, line)?,
                "invert" => invert = parse(key, v, line)?,
                "data_seed" => c.data_seed = parse(key, v, line)?,
                "synth_classes" => c.synth_classes = parse(key, v, line)?,
                "synth_per_class" => c.synth_per_class = parse(key, v, line)?,
                "synth_width" => c.synth_width = parse(key, v, line)?,
                "synth_height" => c.synth_height = parse(key, v, line)?,
                "synth_flip" => c.synth_flip = parse(key, v, line)?,
                "synth_density" => c.synth_density = parse(key, v, line)?,
                "synth_test_classes" => c.synth_test_classes = parse(key, v, line)?,
                _ => return Err(ConfigError::UnknownKey { line, key: key.clone() }),
            }
        }
        let source = |kind: &str, images: Option<PathBuf>, labels: Option<PathBuf>, dir: Option<PathBuf>| {
            Ok(match kind {
                "synth" => DataSource::Synth,
                "idx" => DataSource::Idx {
                    images: images.ok_or(ConfigError::Missing("idx_images"))?,
                    labels,
                },
                "dirs" => DataSource::Dirs {
                    root: dir.ok_or(ConfigError::Missing("data_dir"))?,
                    pool,
                    invert,
                },
                other => {
                    return Err(ConfigError::BadValue {
                        line: 0,
                        key: "data".into(),
                        value: other.to_string(),
                    })
                }
            })
        };
        c.data = source(&data_kind, idx_images, idx_labels, data_dir)?;
        c.test_data = match test_kind {
            None => None,
            Some(kind) => Some(source(&kind, test_idx_images, test_idx_labels, test_data_dir)?),
        };
        if !x_dim_set && c.data == DataSource::Synth {
            c.arch.x_dim = c.synth_width * c.synth_height;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String| Err(ConfigError::BadValue {
            line: 0,
            key: key.to_string(),
            value,
        });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string());
        }
        if self.k < 2 {
            return bad("k", self.k.to_string());
        }
        if self.batch == 0 {
            return bad("batch", self.batch.to_string());
        }
        if self.memory_size == 0 {
            return bad("memory_size", self.memory_size.to_string());
        }
        if self.log_every == 0 {
            return bad("log_every", self.log_every.to_string());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", self.weight_decay.to_string());
        }
        if self.model != ModelKind::Hard && self.arch.z_dim == 0 {
            return bad("z_dim", "0 (only the memory model supports z_dim = 0)".into());
        }
        if self.model == ModelKind::Vae && self.mode == TrainMode::LearnedMemory {
            return bad("mode", "learned_memory (the baseline VAE has no memory)".into());
        }
        Ok(())
    }

    /// The configuration in parseable form, every key listed.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let a = &self.arch;
        let _ = writeln!(s, "model = {}", name_of(MODELS, self.model));
        let _ = writeln!(s, "mode = {}", name_of(MODES, self.mode));
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "memory_size = {}", self.memory_size);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "log_wall_ms = {}", self.log_wall_ms);
        let _ = writeln!(s, "x_dim = {}", a.x_dim);
        let _ = writeln!(s, "z_dim = {}", a.z_dim);
        let _ = writeln!(s, "enc_hidden = {}", join(&a.enc_hidden));
        let _ = writeln!(s, "dec_hidden = {}", join(&a.dec_hidden));
        let _ = writeln!(s, "prior_hidden = {}", join(&a.prior_hidden));
        let _ = writeln!(s, "embed_hidden = {}", a.embed_hidden);
        let _ = writeln!(s, "embed_dim = {}", a.embed_dim);
        let _ = writeln!(s, "similarity = {}", name_of(SIMILARITIES, a.similarity));
        let _ = writeln!(s, "prior = {}", name_of(PRIORS, a.prior_mode));
        let _ = writeln!(s, "activation = {}", name_of(ACTIVATIONS, a.activation));
        let _ = writeln!(s, "episode_classes = {}", self.episode_classes);
        let _ = writeln!(s, "targets_per_class = {}", self.targets_per_class);
        let _ = writeln!(s, "mem_per_class = {}", self.mem_per_class);
        let _ = writeln!(s, "eval_k = {}", self.eval_k);
        let _ = writeln!(s, "binarize = {}", name_of(BINARIZE, self.binarize));
        let mut source = |prefix: &str, src: &DataSource| match src {
            DataSource::Synth => {
                let _ = writeln!(s, "{prefix}data = synth");
            }
            DataSource::Idx { images, labels } => {
                let _ = writeln!(s, "{prefix}data = idx");
                let _ = writeln!(s, "{prefix}idx_images = {}", images.display());
                if let Some(l) = labels {
                    let _ = writeln!(s, "{prefix}idx_labels = {}", l.display());
                }
            }
            DataSource::Dirs { root, pool, invert } => {
                let _ = writeln!(s, "{prefix}data = dirs");
                let _ = writeln!(s, "{prefix}data_dir = {}", root.display());
                let _ = writeln!(s, "pool = {pool}");
                let _ = writeln!(s, "invert = {invert}");
            }
        };
        source("", &self.data);
        if let Some(t) = &self.test_data {
            source("test_", t);
        }
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        let _ = writeln!(s, "synth_classes = {}", self.synth_classes);
        let _ = writeln!(s, "synth_per_class = {}", self.synth_per_class);
        let _ = writeln!(s, "synth_width = {}", self.synth_width);
        let _ = writeln!(s, "synth_height = {}", self.synth_height);
        let _ = writeln!(s, "synth_flip = {}", self.synth_flip);
        let _ = writeln!(s, "synth_density = {}", self.synth_density);
        let _ = writeln!(s, "synth_test_classes = {}", self.synth_test_classes);
        s
    }
}
