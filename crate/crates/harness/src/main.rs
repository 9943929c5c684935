use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::error;
use velora_core::gradcheck::{run_gradcheck, GradCheckConfig};
use velora_harness::analyze::{run_analysis, ANALYSIS_FILE};
use velora_harness::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use velora_harness::compare::compare_runs;
use velora_harness::config::{load_config_with, ConfigError, Overrides};
use velora_harness::metrics::RunLog;
use velora_harness::train::{run_training, TrainError};

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_GRADCHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "velora", version, about = "Train and analyse toy models with rank-1 sub-token activation compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    deterministic: Option<bool>,
    #[arg(long, value_name = "INT")]
    log_every: Option<usize>,
}

impl RunFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out_dir: self.out.as_ref().map(|p| p.display().to_string()),
            deterministic: self.deterministic,
            log_every: self.log_every,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, config and checkpoint.
    Train(RunFlags),
    /// Run the analysis suite on a checkpoint.
    Analyze {
        #[command(flatten)]
        flags: RunFlags,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Align the epochs and memory totals of two or more metrics files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        metrics: Vec<PathBuf>,
        /// Also write the comparison as JSON here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer type.
    Gradcheck {
        /// Random cases per layer type.
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
}

enum Failure {
    Config(ConfigError),
    Numerical(TrainError),
    Gradcheck(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => Failure::Numerical(e),
            other => Failure::Other(other.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            error!("{e}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Numerical(e)) => {
            error!("{e}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Gradcheck(msg)) => {
            error!("{msg}");
            ExitCode::from(EXIT_GRADCHECK)
        }
        Err(Failure::Other(e)) => {
            error!("{e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(flags) => {
            let cfg = load_config_with(&flags.config, &flags.overrides()).map_err(Failure::Config)?;
            let outcome = run_training(&cfg)?;
            if let Some(eval) = outcome.final_eval() {
                println!("final eval {eval}");
            }
            if let Some(dir) = &outcome.out_dir {
                println!("wrote {}", dir.display());
            }
            Ok(())
        }
        Command::Analyze { flags, checkpoint } => {
            let cfg = load_config_with(&flags.config, &flags.overrides()).map_err(Failure::Config)?;
            let out = cfg.out_dir.as_ref().map(PathBuf::from);
            let path = checkpoint
                .or_else(|| out.as_ref().map(|d| d.join(CHECKPOINT_FILE)))
                .context("analyze needs --checkpoint or an output directory holding one")?;
            let ck = read_checkpoint(&path)?;
            let rows = run_analysis(&cfg, &ck)?;
            let text: String = rows.iter().map(|r| r.to_line() + "\n").collect();
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).context("creating output directory")?;
                    std::fs::write(dir.join(ANALYSIS_FILE), text).context("writing analysis rows")?;
                    println!("wrote {} rows to {}", rows.len(), dir.join(ANALYSIS_FILE).display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Compare { metrics, out } => {
            let logs = metrics
                .iter()
                .map(|p| RunLog::read(p).with_context(|| format!("reading {}", p.display())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let table = compare_runs(&logs).map_err(anyhow::Error::from)?;
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).context("creating output directory")?;
                let json = serde_json::to_string_pretty(&table).context("serialising comparison")?;
                std::fs::write(dir.join("comparison.json"), json).context("writing comparison")?;
            }
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let cfg = GradCheckConfig {
                seeds,
                ..GradCheckConfig::default()
            };
            let report = run_gradcheck(&cfg).map_err(anyhow::Error::from)?;
            print!("{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Failure::Gradcheck(format!("{} cases failed", report.failures().count())))
            }
        }
    }
}

fn read_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}
