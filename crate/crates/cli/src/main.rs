mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Axis, CliError};
use config::{to_toml, FlagOverrides};

#[derive(Parser, Debug)]
#[command(name = "digflow", version, about = "Discrepancy-gated flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and report loss, transport cost and gates.
    Train(Common),
    /// Evaluate a checkpoint, or train and evaluate one model per seed.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate trained models at every refinement count in `sweep.n_refine`.
    RefineSweep(Common),
    /// Train and evaluate every point along one ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Run the numerical verification suite.
    Verify(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.dig.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for grid points; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    g_min: Option<f64>,
    /// Use sliced W2 with this many projections.
    #[arg(long)]
    projections: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    shortcut_fraction: Option<f64>,
    #[arg(long)]
    n_refine: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

impl Common {
    fn flags(&self) -> FlagOverrides {
        FlagOverrides {
            seed: self.seed,
            out: self.out.clone(),
            lambda: self.lambda,
            tau: self.tau,
            g_min: self.g_min,
            projections: self.projections,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            width: self.width,
            shortcut_fraction: self.shortcut_fraction,
            n_refine: self.n_refine,
            episodes: self.episodes,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, name) = match &cli.command {
        Command::Train(c) => (c, "train"),
        Command::Eval { common, .. } => (common, "eval"),
        Command::RefineSweep(c) => (c, "refine-sweep"),
        Command::Ablate { common, .. } => (common, "ablate"),
        Command::Verify(c) => (c, "verify"),
    };
    // A checkpoint's sibling config.toml stands in for a missing --config.
    let sibling = match &cli.command {
        Command::Eval {
            checkpoint: Some(p),
            ..
        } if common.config.is_none() => {
            let c = p.with_file_name("config.toml");
            c.exists().then_some(c)
        }
        _ => None,
    };
    let path = common.config.as_deref().or(sibling.as_deref());
    let cfg = config::load(path, &common.sets, &common.flags())
        .map_err(|e| CliError::Config(e.to_string()))?;
    eprintln!("# {} {name}: resolved config", config::VERSION);
    for line in to_toml(&cfg).lines() {
        eprintln!("#   {line}");
    }
    let jobs = common.jobs;
    match &cli.command {
        Command::Train(_) => commands::train_cmd(&cfg, jobs),
        Command::Eval { checkpoint, .. } => commands::eval_cmd(&cfg, jobs, checkpoint.as_deref()),
        Command::RefineSweep(_) => commands::refine_sweep_cmd(&cfg, jobs),
        Command::Ablate { axis, .. } => commands::ablate_cmd(&cfg, jobs, *axis),
        Command::Verify(_) => commands::verify_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
