use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

mod manifest;
mod stages;

#[derive(Debug, Parser)]
#[command(name = "ccmia", version, about = "Federated GNN simulator with membership and ownership attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory, overriding the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the target and shadow graphs from the config's SBM.
    GenSynth(Common),
    /// Split the target graph into client subgraphs.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Number of clients.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        balance_tol: Option<f64>,
        /// Target bundle directory (default: <out>/target).
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Run federated training over the partition.
    TrainFed {
        #[command(flatten)]
        common: Common,
        /// fedavg, fedprox, scaffold, fednova or feddf_simplified.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Shadow-model membership inference against the trained global model.
    AttackMi(Common),
    /// Eavesdrop, invert, build prototypes and assign target nodes to clients.
    AttackOwn {
        #[command(flatten)]
        common: Common,
        /// Per-round interception probability.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Eavesdrop and invert every client's upload.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Per-round interception probability.
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Privacy/utility sweep over perturbation budgets.
    Defend {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets; `inf` is the undefended run.
        #[arg(long, default_value = "inf,8,4,2,1")]
        etas: String,
    },
    /// Summarize finished runs into report.csv.
    Report {
        #[command(flatten)]
        common: Common,
        /// Extra run directories to include.
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::Partition { .. } => "partition",
            Command::TrainFed { .. } => "train-fed",
            Command::AttackMi(_) => "attack-mi",
            Command::AttackOwn { .. } => "attack-own",
            Command::Invert { .. } => "invert",
            Command::Defend { .. } => "defend",
            Command::Report { .. } => "report",
        }
    }
}

fn init_threads() -> Result<(), stages::CliError> {
    if let Ok(v) = std::env::var("CCMIA_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| stages::CliError::usage(format!("CCMIA_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| stages::CliError::usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = init_threads().and_then(|_| stages::run(&cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({
                "subcommand": name,
                "error": e.kind,
                "message": e.message,
            });
            eprintln!("{record}");
            ExitCode::from(e.code)
        }
    }
}
