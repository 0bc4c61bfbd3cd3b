use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "memvae", version, about = "Memory-addressed VAE trained with VIMCO")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Posterior samples per target (evaluation default: eval_k).
    #[arg(long)]
    pub k: Option<usize>,
    /// Run directory for outputs.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct Trained {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Memory size for recall-style evaluation memories.
    #[arg(long)]
    pub memory_size: Option<usize>,
    /// Dataset split that memories and targets are drawn from.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Feedforward,
    Weighted,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.txt, metrics.csv and model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// High-K negative bound on held-out data.
    Eval {
        #[command(flatten)]
        trained: Trained,
        /// Episodes (few-shot) or memory draws (recall) to average over.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// NLL over a grid of memory classes C and examples per class N.
    Sweep {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        classes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "4")]
        per_class: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        targets_per_class: usize,
    },
    /// Sample grid: one row per memory slot, first column is the slot.
    Sample {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 8)]
        rows: usize,
        #[arg(long, default_value_t = 8)]
        cols: usize,
        /// Decode the prior mean of z instead of sampling it.
        #[arg(long)]
        mean: bool,
    },
    /// q(a|x) histogram and top entries for one held-out target.
    Inspect {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Few-shot classification accuracy over random held-out episodes.
    Classify {
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 5)]
        way: usize,
        #[arg(long, default_value_t = 1)]
        shot: usize,
        #[arg(long, default_value_t = 4)]
        queries: usize,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, value_enum, default_value = "feedforward")]
        rule: RuleArg,
    },
    /// Finite-difference gradient checks on small models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { common, steps } => commands::train(&common, steps),
        Command::Eval { trained, episodes } => commands::eval(&trained, episodes),
        Command::Sweep {
            trained,
            classes,
            per_class,
            targets_per_class,
        } => commands::sweep(&trained, &classes, &per_class, targets_per_class),
        Command::Sample {
            trained,
            rows,
            cols,
            mean,
        } => commands::sample(&trained, rows, cols, mean),
        Command::Inspect { trained, top } => commands::inspect(&trained, top),
        Command::Classify {
            trained,
            way,
            shot,
            queries,
            episodes,
            rule,
        } => commands::classify(&trained, way, shot, queries, episodes, rule),
        Command::Gradcheck { common, tol } => commands::gradcheck(&common, tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
