use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prp_cli::commands::{self, CliError, EvalTask};
use prp_cli::RunConfig;

#[derive(Parser)]
#[command(name = "prp", version, about = "Point re-projection supervision and evaluation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory (overrides `dataset` in the config).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Homography,
    Pose,
    Register,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic RGB-D sequence.
    Synth(Common),
    /// Sample frame pairs and write dense and cell correspondences.
    Pairs(Common),
    /// Generate pseudo ground-truth interest points.
    Labels(Common),
    /// Run an evaluation protocol.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        task: Task,
    },
    /// Check analytic loss gradients against finite differences.
    Losscheck(Common),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn prepare(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(c.seed.unwrap_or(cfg.seed));
    if let Some(o) = &c.out {
        cfg.out = Some(o.clone());
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(c) => commands::synth(&prepare(&c)?).map(drop),
        Command::Pairs(c) => commands::pairs(&prepare(&c)?).map(drop),
        Command::Labels(c) => commands::labels(&prepare(&c)?).map(drop),
        Command::Losscheck(c) => commands::losscheck(&prepare(&c)?).map(drop),
        Command::Eval { common, task } => {
            let task = match task {
                Task::Homography => EvalTask::Homography,
                Task::Pose => EvalTask::Pose,
                Task::Register => EvalTask::Register,
            };
            commands::eval(&prepare(&common)?, task).map(drop)
        }
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
