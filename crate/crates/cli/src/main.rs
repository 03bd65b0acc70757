use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use promptdsi::continual::StrategyTag;
use promptdsi::run::{DataSource, RunConfig};

mod commands;

#[derive(Parser)]
#[command(
    name = "promptdsi",
    version,
    about = "Continual indexing for a classification-based differentiable search index"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that builds a run configuration.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (and the synthetic data seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Reads the timeline from a JSONL file instead of generating it.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<StrategyTag>,
    #[arg(long)]
    base_epochs: Option<usize>,
    /// Epochs per continual timestep (before the prompt factor).
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(path) = &self.data {
            cfg.data = DataSource::Jsonl(path.clone());
        }
        if let Some(s) = self.strategy {
            cfg.plan.strategy = s;
        }
        if let Some(e) = self.base_epochs {
            cfg.plan.base_epochs = e;
        }
        if let Some(e) = self.epochs {
            cfg.plan.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generates the synthetic timeline and writes it as JSONL (.gz compresses).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the initial model on D_0 and saves it as checkpoint t0.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory receiving config.json and checkpoints/t0.
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs continual indexing of D_1..D_T and writes a run directory.
    Continue {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Base checkpoint directory; without it a base is trained first.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Root for run directories, named <STRATEGY>-<config hash>.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-evaluates a checkpoint and compares against the run's matrix row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to config.json two levels above the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Collects run summaries into results-table CSV and JSON.
    Report {
        /// Run directories written by `continue` or `seed-sweep`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares single-pass and two-pass prompt selection on one workload.
    BenchPass {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Uses this model instead of a freshly initialised one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Timed repetitions of the workload per mode.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Repeats runs over seeds and reports mean and standard deviation.
    SeedSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Strategies to run per seed; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyTag>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("PROMPTDSI_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| promptdsi::Error::Config(format!("PROMPTDSI_THREADS={v} is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&cfg.resolve()?, &out),
        Command::TrainBase { cfg, out } => commands::train_base(&cfg.resolve()?, &out),
        Command::Continue { cfg, base, out } => {
            commands::continue_run(&cfg.resolve()?, base.as_deref(), &out)
        }
        Command::Eval { checkpoint, config } => commands::eval(&checkpoint, config.as_deref()),
        Command::Report { runs, out } => commands::report(&runs, &out),
        Command::BenchPass {
            cfg,
            checkpoint,
            repeats,
        } => commands::bench_pass(&cfg.resolve()?, checkpoint.as_deref(), repeats),
        Command::SeedSweep {
            cfg,
            seeds,
            strategies,
            out,
        } => commands::seed_sweep(&cfg.resolve()?, &seeds, &strategies, &out),
    }
}

/// Exit status for an error chain: the library's classification when one
/// is present, otherwise a runtime failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<promptdsi::Error>())
        .map_or(4, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
