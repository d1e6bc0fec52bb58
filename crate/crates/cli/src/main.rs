use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fjl_cli::commands::{cmd_ablation, cmd_datagen, cmd_eval, cmd_inspect, cmd_train, BEST_CHECKPOINT};
use fjl_cli::config::{ExperimentConfig, Overrides, TrainMode};
use fjl_cli::CliResult;
use fjl_core::federation::Transport;

#[derive(Parser)]
#[command(name = "fjl", version, about = "Federated rehabilitation-robot guidance: data, training, ablation, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file (flat keys, see README)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for data generation, splitting, initialization and shuffling
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file (default: <out>/dataset.fjlds)
    #[arg(long)]
    dataset: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            dataset: self.dataset.clone(),
            ..Overrides::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic exercise dataset
    Datagen {
        #[command(flatten)]
        common: Common,
    },
    /// Train centrally or federated; writes metrics.csv and checkpoints
    Train {
        #[command(flatten)]
        common: Common,
        /// central or federated
        #[arg(long)]
        mode: Option<TrainMode>,
        /// in_process or tcp
        #[arg(long)]
        transport: Option<Transport>,
    },
    /// Run the 4 architectures x {MSE, relational} grid
    Ablation {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        transport: Option<Transport>,
    },
    /// Evaluate a checkpoint on the held-out patients
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/best.fjlck)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a checkpoint's header and parameter table
    InspectCheckpoint {
        path: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Datagen { common } => {
            let cfg = ExperimentConfig::resolve(common.config.as_deref(), &common.overrides())?;
            println!("{}", cmd_datagen(&cfg)?.line());
        }
        Command::Train {
            common,
            mode,
            transport,
        } => {
            let overrides = Overrides {
                mode,
                transport,
                ..common.overrides()
            };
            let cfg = ExperimentConfig::resolve(common.config.as_deref(), &overrides)?;
            println!("{}", cmd_train(&cfg)?.line());
        }
        Command::Ablation { common, transport } => {
            let overrides = Overrides {
                transport,
                ..common.overrides()
            };
            let cfg = ExperimentConfig::resolve(common.config.as_deref(), &overrides)?;
            print!("{}", cmd_ablation(&cfg)?.table);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = ExperimentConfig::resolve(common.config.as_deref(), &common.overrides())?;
            let path = checkpoint.unwrap_or_else(|| cfg.out_dir.join(BEST_CHECKPOINT));
            print!("{}", cmd_eval(&cfg, &path, common.seed, common.config.is_some())?.text);
        }
        Command::InspectCheckpoint { path } => print!("{}", cmd_inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

