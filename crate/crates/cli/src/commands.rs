use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};

use memvae::data::episode::{sample_episode, EpisodeSpec};
use memvae::data::Dataset;
use memvae::eval::classify::fewshot_classify;
use memvae::eval::inspect::{inspect_posterior, write_histogram, write_strip};
use memvae::eval::sweep::{memory_sweep, write_sweep_csv};
use memvae::eval::{eval_nll, gradcheck_suite, mean_stderr, ClassifyRule};
use memvae::memory::MemoryBuffer;
use memvae::models::{AnyModel, MemVae, Model, ZMode};
use memvae::training::{load_datasets, load_params, MetricsWriter, TrainConfig, TrainMode, Trainer};
use memvae::{rng_from_seed, Error, Rng};
use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::{Common, RuleArg, SplitArg, Trained};

pub enum CliError {
    Usage(String),
    Numerical(String),
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Numerical(_) | CliError::Run(Error::NonFinite { .. }) => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Run(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = common.k {
        cfg.eval_k = k;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_out(common: &Common, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

pub fn train(common: &Common, steps: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(k) = common.k {
        cfg.k = k;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    prepare_out(common, &cfg)?;
    let (train, _) = load_datasets(&cfg)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut metrics = MetricsWriter::new(BufWriter::new(File::create(common.out.join("metrics.csv"))?))?;
    let result = trainer.train(&train, cfg.steps, |row| {
        metrics.write(row)?;
        eprintln!(
            "step {:>6}  nll_bound {:.4}  kl_a {:.4}  kl_z {:.4}  recon {:.4}",
            row.step, row.nll_bound, row.kl_a, row.kl_z, row.recon
        );
        Ok(())
    });
    drop(metrics);
    if let Err(Error::NonFinite {
        step,
        batch_id,
        batch_indices,
    }) = &result
    {
        let dump = format!("step = {step}\nbatch_id = {batch_id}\nbatch_indices = {batch_indices:?}\n");
        fs::write(common.out.join("nonfinite.txt"), dump)?;
    }
    result?;
    trainer.save(&common.out.join("model.ckpt"))?;
    Ok(())
}

struct Loaded {
    cfg: TrainConfig,
    model: AnyModel,
    learned: Option<MemoryBuffer>,
    data: Dataset,
    rng: Rng,
}

fn load_trained(t: &Trained) -> Result<Loaded> {
    let cfg = load_config(&t.common)?;
    if !t.checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", t.checkpoint.display())));
    }
    prepare_out(&t.common, &cfg)?;
    let (train, test) = load_datasets(&cfg)?;
    let data = match t.split {
        SplitArg::Train => train,
        SplitArg::Test => test,
    };
    let (model, learned) = load_params(&t.checkpoint, &cfg)?;
    let rng = rng_from_seed(cfg.seed);
    Ok(Loaded {
        cfg,
        model,
        learned,
        data,
        rng,
    })
}

fn hard(l: &Loaded, what: &str) -> Result<MemVae> {
    l.model
        .as_hard()
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("{what} needs the hard-attention model")))
}

/// Memories and target indices for held-out evaluation, by training mode.
fn eval_groups(l: &mut Loaded, size: Option<usize>, episodes: usize) -> Result<Vec<(Option<MemoryBuffer>, Vec<usize>)>> {
    let n = l.data.len();
    if !l.model.uses_memory() {
        return Ok(vec![(None, (0..n).collect())]);
    }
    if let Some(m) = &l.learned {
        return Ok(vec![(Some(m.clone()), (0..n).collect())]);
    }
    match l.cfg.mode {
        TrainMode::FewShot => {
            let spec = EpisodeSpec {
                n_classes: l.cfg.episode_classes,
                targets_per_class: l.cfg.targets_per_class,
                mem_per_class: l.cfg.mem_per_class,
            };
            (0..episodes)
                .map(|_| {
                    let ep = sample_episode(&l.data, &spec, &mut l.rng).map_err(Error::from)?;
                    Ok((Some(ep.memory(&l.data)), ep.target_indices))
                })
                .collect()
        }
        _ => {
            let size = size.unwrap_or(l.cfg.memory_size).min(n);
            let all: Vec<usize> = (0..n).collect();
            (0..episodes.max(1))
                .map(|_| {
                    let slots: Vec<usize> = all.choose_multiple(&mut l.rng, size).copied().collect();
                    let rows: Vec<Vec<f64>> = slots.iter().map(|&i| l.data.image(i).to_vec()).collect();
                    let labels = slots.iter().map(|&i| l.data.class_of(i)).collect::<Option<Vec<_>>>();
                    Ok((Some(MemoryBuffer::from_rows(&rows, labels)?), slots))
                })
                .collect()
        }
    }
}

pub fn eval(t: &Trained, episodes: usize) -> Result<()> {
    let mut l = load_trained(t)?;
    let k = l.cfg.eval_k;
    let groups = eval_groups(&mut l, t.memory_size, episodes)?;
    let mut per_example = Vec::new();
    let (mut kl_a, mut kl_z, mut recon) = (0.0, 0.0, 0.0);
    for (mem, idx) in &groups {
        let x = l.data.gather(idx);
        let r = eval_nll(&l.model, mem.as_ref(), &x, None, k, &mut l.rng)?;
        let w = r.n as f64;
        kl_a += r.kl_a * w;
        kl_z += r.kl_z * w;
        recon += r.recon * w;
        per_example.extend(r.per_example);
    }
    let n = per_example.len();
    if per_example.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("non-finite bound during evaluation".into()));
    }
    let (nll, stderr) = mean_stderr(&per_example);
    let report = format!(
        "k = {k}\nn = {n}\nnll = {nll}\nstderr = {stderr}\nkl_a = {}\nkl_z = {}\nrecon = {}\n",
        kl_a / n as f64,
        kl_z / n as f64,
        recon / n as f64
    );
    fs::write(t.common.out.join("eval.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn sweep(t: &Trained, classes: &[usize], per_class: &[usize], targets_per_class: usize) -> Result<()> {
    let mut l = load_trained(t)?;
    if classes.is_empty() || per_class.is_empty() || classes.contains(&0) || per_class.contains(&0) {
        return Err(CliError::Usage("--classes and --per-class need positive values".into()));
    }
    let res = memory_sweep(&l.model, &l.data, classes, per_class, targets_per_class, l.cfg.eval_k, &mut l.rng)?;
    write_sweep_csv(File::create(t.common.out.join("sweep.csv"))?, &res.rows)?;
    write_sweep_csv(io::stdout().lock(), &res.rows)?;
    Ok(())
}

pub fn sample(t: &Trained, rows: usize, cols: usize, mean: bool) -> Result<()> {
    let mut l = load_trained(t)?;
    let model = hard(&l, "sample")?;
    let (mem, _) = eval_groups(&mut l, t.memory_size, 1)?.remove(0);
    let mem = mem.expect("hard model has memory");
    let z_mode = if mean { ZMode::Mean } else { ZMode::Sample };
    let mut tiles = Vec::new();
    for r in 0..rows.min(mem.len()) {
        tiles.push(mem.row(r).to_vec());
        for g in model.generate(&mem, cols, Some(r), z_mode, &mut l.rng)? {
            tiles.push(g.pixels.iter().map(|&p| p as f64).collect());
        }
    }
    let free = model.generate(&mem, cols, None, z_mode, &mut l.rng)?;
    tiles.push(vec![0.5; mem.dim()]);
    tiles.extend(free.iter().map(|g| g.pixels.iter().map(|&p| p as f64).collect()));
    let path = t.common.out.join("samples.pgm");
    memvae::data::pgm::write_grid(&path, &tiles, l.data.side(), cols + 1)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn inspect(t: &Trained, top: usize) -> Result<()> {
    let mut l = load_trained(t)?;
    let model = hard(&l, "inspect")?;
    let (mem, targets) = eval_groups(&mut l, t.memory_size, 1)?.remove(0);
    let mem = mem.expect("hard model has memory");
    let target = targets[l.rng.random_range(0..targets.len())];
    let x = l.data.image(target).to_vec();
    let dump = inspect_posterior(&model, &mem, &x, top)?;
    write_histogram(File::create(t.common.out.join("histogram.csv"))?, &dump, mem.labels())?;
    write_strip(&t.common.out.join("top.pgm"), &dump, &mem, &x, l.data.side())?;
    let mut out = io::stdout().lock();
    let class = |c: Option<usize>| c.map_or_else(|| "-".to_string(), |c| c.to_string());
    writeln!(out, "target {target} class {}", class(l.data.class_of(target)))?;
    for (a, p) in &dump.top {
        writeln!(out, "slot {a:>4}  prob {p:.4}  class {}", class(mem.labels().map(|c| c[*a])))?;
    }
    Ok(())
}

pub fn classify(t: &Trained, way: usize, shot: usize, queries: usize, episodes: usize, rule: RuleArg) -> Result<()> {
    let mut l = load_trained(t)?;
    let model = hard(&l, "classify")?;
    let rule = match rule {
        RuleArg::Feedforward => ClassifyRule::Feedforward,
        RuleArg::Weighted => ClassifyRule::Weighted,
    };
    let spec = EpisodeSpec {
        n_classes: way,
        targets_per_class: queries,
        mem_per_class: shot,
    };
    let mut accs = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = sample_episode(&l.data, &spec, &mut l.rng).map_err(Error::from)?;
        let x = l.data.gather(&ep.target_indices);
        let r = fewshot_classify(&model, &ep.memory(&l.data), &x, &ep.target_labels, rule, l.cfg.eval_k, &mut l.rng)?;
        accs.push(r.accuracy);
    }
    let (acc, stderr) = mean_stderr(&accs);
    let report = format!("way = {way}\nshot = {shot}\nrule = {rule:?}\nepisodes = {episodes}\naccuracy = {acc}\nstderr = {stderr}\n");
    fs::write(t.common.out.join("classify.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn gradcheck(common: &Common, tol: f64) -> Result<()> {
    let cfg = load_config(common)?;
    prepare_out(common, &cfg)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut report = String::new();
    let mut failed = Vec::new();
    for (name, params, r) in gradcheck_suite(tol, &mut rng)? {
        let line = format!(
            "{name}: params {params} checked {} max_rel_err {:.3e} worst {}[{}] analytic {:.6e} numeric {:.6e} {}\n",
            r.checked,
            r.max_rel_err,
            r.worst_param,
            r.worst_index,
            r.analytic,
            r.numeric,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(name);
        }
        report.push_str(&line);
    }
    fs::write(common.out.join("gradcheck.txt"), &report)?;
    print!("{report}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
