//! The optimization loop for the three training modes.

pub mod adam;
pub mod config;

use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use thiserror::Error;

use crate::data::{self, sample_episode, synth_pattern_corpus, Dataset, EpisodeSpec, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::estimators::{step_gradients, StepStats};
use crate::memory::MemoryBuffer;
use crate::models::{AnyModel, BaselineVae, MemVae, Model, Noise, SoftAttention};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamId, Tensor};
use crate::{rng_from_seed, Rng};

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use config::{DataSource, ModelKind, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("cannot read config {0}: {1}")]
    Io(String, String),
}

pub const METRICS_HEADER: &str = "step,nll_bound,kl_a,kl_z,recon,wall_ms";

/// Checkpoint entry name of trainable memory.
pub const MEMORY_PARAM: &str = "memory";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub nll_bound: f64,
    pub kl_a: f64,
    pub kl_z: f64,
    pub recon: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn from_stats(step: usize, s: &StepStats, wall_ms: u64) -> Self {
        Self {
            step,
            nll_bound: -s.bound,
            kl_a: s.kl_a,
            kl_z: s.kl_z,
            recon: s.recon,
            wall_ms,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.nll_bound, self.kl_a, self.kl_z, self.recon, self.wall_ms
        )
    }
}

/// Writes the metrics header, then one line per row.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.out, "{}", row.csv_line())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Train and held-out datasets described by a config.
pub fn load_datasets(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let mut rng = rng_from_seed(cfg.data_seed);
    let load = |src: &DataSource, split: Split, classes: usize, rng: &mut Rng| -> Result<Dataset> {
        Ok(match src {
            DataSource::Synth => {
                let spec = SynthSpec {
                    n_classes: classes,
                    per_class: cfg.synth_per_class,
                    width: cfg.synth_width,
                    height: cfg.synth_height,
                    flip: cfg.synth_flip,
                    density: cfg.synth_density,
                };
                synth_pattern_corpus(&spec, split, rng)?
            }
            DataSource::Idx { images, labels } => {
                data::load_idx_dataset(images, labels.as_deref(), split, cfg.binarize, rng)?
            }
            DataSource::Dirs { root, pool, invert } => data::load_class_dirs(root, *pool, *invert, split)?,
        })
    };
    let train = load(&cfg.data, Split::Train, cfg.synth_classes, &mut rng)?;
    let test = match (&cfg.test_data, &cfg.data) {
        (Some(src), _) => load(src, Split::Test, cfg.synth_test_classes, &mut rng)?,
        (None, DataSource::Synth) => load(&DataSource::Synth, Split::Test, cfg.synth_test_classes, &mut rng)?,
        (None, _) => {
            return Err(Error::Invalid(
                "file-backed data needs test_data for held-out evaluation".into(),
            ))
        }
    };
    if train.dim() != cfg.arch.x_dim || test.dim() != cfg.arch.x_dim {
        return Err(Error::Invalid(format!(
            "images have {} pixels but x_dim is {}",
            train.dim(),
            cfg.arch.x_dim
        )));
    }
    Ok((train, test))
}

pub fn build_model(cfg: &TrainConfig, rng: &mut Rng) -> Result<AnyModel> {
    Ok(match cfg.model {
        ModelKind::Hard => AnyModel::Hard(MemVae::new(cfg.arch.clone(), rng)),
        ModelKind::Vae => AnyModel::Vae(BaselineVae::new(cfg.arch.clone(), rng)?),
        ModelKind::Soft => AnyModel::Soft(SoftAttention::new(cfg.arch.clone(), rng)?),
    })
}

/// Model, optimizer state and the rng stream of one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: AnyModel,
    /// Trainable memory in learned-memory mode.
    pub memory: Option<MemoryBuffer>,
    adam: Adam,
    rng: Rng,
    step: usize,
}

impl Trainer {
    /// Initializes parameters from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let model = build_model(&config, &mut rng)?;
        let memory = (config.mode == TrainMode::LearnedMemory)
            .then(|| MemoryBuffer::learned(config.memory_size, config.arch.x_dim, &mut rng));
        let mut sizes: Vec<usize> = model.store().iter().map(|(_, t)| t.numel()).collect();
        if let Some(m) = &memory {
            sizes.push(m.entries().numel());
        }
        let mut adam_cfg = AdamConfig::new(config.lr);
        adam_cfg.weight_decay = config.weight_decay;
        Ok(Self {
            adam: Adam::new(adam_cfg, &sizes),
            config,
            model,
            memory,
            rng,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws the memory and targets for the next step. Returns the memory
    /// (absent for learned memory, which lives on the trainer), the targets
    /// and the dataset indices of the targets.
    fn next_batch(&mut self, ds: &Dataset) -> Result<(Option<MemoryBuffer>, Vec<f64>, Vec<usize>)> {
        let c = &self.config;
        match c.mode {
            TrainMode::Recall => {
                if ds.len() < c.memory_size {
                    return Err(Error::Invalid(format!(
                        "recall needs {} images, dataset has {}",
                        c.memory_size,
                        ds.len()
                    )));
                }
                let all: Vec<usize> = (0..ds.len()).collect();
                let slots: Vec<usize> = all.choose_multiple(&mut self.rng, c.memory_size).copied().collect();
                let rows: Vec<Vec<f64>> = slots.iter().map(|&i| ds.image(i).to_vec()).collect();
                let mem = MemoryBuffer::from_rows(&rows, None)?;
                let picks: Vec<usize> = (0..c.batch).map(|_| *slots.choose(&mut self.rng).unwrap()).collect();
                Ok((Some(mem), ds.gather(&picks), picks))
            }
            TrainMode::FewShot => {
                let spec = EpisodeSpec {
                    n_classes: c.episode_classes,
                    targets_per_class: c.targets_per_class,
                    mem_per_class: c.mem_per_class,
                };
                let ep = sample_episode(ds, &spec, &mut self.rng)?;
                let mut order = ep.target_indices.clone();
                order.shuffle(&mut self.rng);
                Ok((Some(ep.memory(ds)), ds.gather(&order), order))
            }
            TrainMode::LearnedMemory => {
                let picks: Vec<usize> = (0..c.batch).map(|_| rand::Rng::random_range(&mut self.rng, 0..ds.len())).collect();
                Ok((None, ds.gather(&picks), picks))
            }
        }
    }

    /// One optimizer step; errors on a non-finite loss.
    pub fn step(&mut self, ds: &Dataset) -> Result<StepStats> {
        let (episode_mem, x, indices) = self.next_batch(ds)?;
        let batch = indices.len();
        let k = self.config.k;
        self.model.store_mut().zero_grads();
        if let Some(m) = &mut self.memory {
            m.entries_mut().zero_grad();
        }
        let uses_memory = self.model.uses_memory();
        let noise = Noise::Sample(&mut self.rng);
        let stats = if !uses_memory {
            step_gradients(&mut self.model, None, &x, batch, k, noise)?
        } else if let Some(m) = self.memory.as_mut() {
            step_gradients(&mut self.model, Some(m), &x, batch, k, noise)?
        } else {
            let mut m = episode_mem.ok_or_else(|| Error::Invalid("no memory for this step".into()))?;
            step_gradients(&mut self.model, Some(&mut m), &x, batch, k, noise)?
        };
        if !stats.loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                batch_id: self.step,
                batch_indices: indices,
            });
        }
        self.apply_gradients();
        self.step += 1;
        Ok(stats)
    }

    fn apply_gradients(&mut self) {
        let n_params = self.model.store().len();
        let mut grads: Vec<Vec<f64>> = self
            .model
            .store()
            .iter()
            .map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        if let Some(m) = &self.memory {
            let t = m.entries();
            grads.push(t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]));
        }
        if self.config.grad_clip > 0.0 {
            let mut views: Vec<&mut [f64]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
            clip_global_norm(&mut views, self.config.grad_clip);
        }
        self.adam.begin_step();
        for i in 0..n_params {
            let values = self.model.store_mut().get_mut(ParamId(i)).values_mut();
            self.adam.update(i, values, &grads[i], true);
        }
        if let Some(m) = &mut self.memory {
            self.adam.update(n_params, m.entries_mut().values_mut(), &grads[n_params], false);
        }
    }

    /// Runs `steps` steps, reporting a row every `log_every` steps and after
    /// the last one.
    pub fn train(
        &mut self,
        ds: &Dataset,
        steps: usize,
        mut on_row: impl FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for i in 0..steps {
            let t0 = Instant::now();
            let stats = self.step(ds)?;
            let wall = if self.config.log_wall_ms {
                t0.elapsed().as_millis() as u64
            } else {
                0
            };
            if (i + 1) % self.config.log_every == 0 || i + 1 == steps {
                let row = MetricsRow::from_stats(self.step, &stats, wall);
                on_row(&row)?;
                rows.push(row);
            }
        }
        Ok(rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.model, self.memory.as_ref())
    }
}

pub fn save_params(path: &Path, model: &AnyModel, memory: Option<&MemoryBuffer>) -> Result<()> {
    let mut entries: Vec<(&str, &Tensor)> = model.store().iter().collect();
    if let Some(m) = memory {
        entries.push((MEMORY_PARAM, m.entries()));
    }
    save_checkpoint(path, entries)?;
    Ok(())
}

/// Rebuilds the model described by `cfg` and overwrites its parameters (and
/// learned memory) from a checkpoint.
pub fn load_params(path: &Path, cfg: &TrainConfig) -> Result<(AnyModel, Option<MemoryBuffer>)> {
    let mut model = build_model(cfg, &mut rng_from_seed(cfg.seed))?;
    let mut memory = None;
    let mut seen = 0;
    for (name, t) in load_checkpoint(path)? {
        if name == MEMORY_PARAM {
            memory = Some(MemoryBuffer::from_tensor(t, false)?);
            continue;
        }
        let id = model
            .store()
            .find(&name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint parameter `{name}` is not in the model")))?;
        let p = model.store_mut().get_mut(id);
        if p.shape() != t.shape() {
            return Err(Error::Invalid(format!(
                "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                p.shape()
            )));
        }
        p.values_mut().copy_from_slice(t.values());
        seen += 1;
    }
    if seen != model.store().len() {
        return Err(Error::Invalid(format!(
            "checkpoint holds {seen} of {} model parameters",
            model.store().len()
        )));
    }
    Ok((model, memory))
}
