//! `canguard` command-line pipeline: decode, gen, train, attack, defend, eval.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// CAN intrusion detection under adversarial attack.
#[derive(Parser, Debug)]
#[command(name = "canguard", version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace every seed in the configuration with this value.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decode a raw CAN trace CSV into `timestamp,signal_name,value` rows.
    Decode {
        #[command(flatten)]
        common: Common,
        /// DBC file (overrides the config; bundled catalog when neither is set).
        #[arg(long)]
        dbc: Option<PathBuf>,
        /// Raw trace CSV `timestamp,can_id_hex,b0..b7`.
        #[arg(long)]
        trace: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the windowed FDIA dataset and its splits.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the LSTM detector.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sweep FGSM and BIM against the trained detector.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to attack (default: the train stage's model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Adversarial retraining of the trained detector.
    Defend {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint (default: the train stage's model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Test-set metrics for a checkpoint, optionally with the optimizer comparison.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: the train stage's model).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also train one model per configured optimizer and write the table.
        #[arg(long)]
        compare: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Decode { common, dbc, trace, out } => stages::decode(&common, dbc, &trace, &out),
        Command::Gen { common } => stages::gen(&common),
        Command::Train { common } => stages::train(&common),
        Command::Attack { common, checkpoint } => stages::attack(&common, checkpoint),
        Command::Defend { common, checkpoint } => stages::defend(&common, checkpoint),
        Command::Eval { common, checkpoint, compare } => stages::eval(&common, checkpoint, compare),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
