//! `walkpilot`: generate synthetic sidewalk data, curate and expand it, fit
//! anchors, train the policy and evaluate it open- and closed-loop.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalSplit, ScenarioSplit};
use config::{RunConfig, UsageError};

#[derive(Parser, Debug)]
#[command(name = "walkpilot", version, about = "Sidewalk imitation-learning pipeline", after_help = config::key_help())]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate scenario bundles (world, expert run, rendered frames).
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Window, filter and balance scenario logs into a sample store.
    Curate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: ScenarioSplit,
    },
    /// Add corrective and/or relit samples to a store.
    Expand {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corrective: bool,
        #[arg(long)]
        relight: bool,
    },
    /// Fit horizon-specific anchors on a store's futures.
    Anchors {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes the checkpoint, its `.cfg` and a loss curve.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open-loop metrics of a checkpoint on a store.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "regular")]
        split: EvalSplit,
        /// Also score the raw anchors with uniform confidence.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop rollouts of a checkpoint in scenario worlds.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        anchors: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: ScenarioSplit,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate result files written by `eval --out`.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::Gen { out } => commands::gen(&cfg, &out),
        Cmd::Curate { input, out, split } => commands::curate(&cfg, &input, &out, split),
        Cmd::Expand {
            input,
            out,
            corrective,
            relight,
        } => commands::expand(&cfg, &input, &out, corrective, relight),
        Cmd::Anchors { input, out } => commands::anchors(&cfg, &input, &out),
        Cmd::Train { input, anchors, out } => commands::train(&cfg, &input, &anchors, &out),
        Cmd::Eval {
            checkpoint,
            anchors,
            input,
            split,
            baseline,
            out,
        } => commands::eval(&cfg, &checkpoint, &anchors, &input, split, out.as_deref(), baseline),
        Cmd::Rollout {
            checkpoint,
            anchors,
            input,
            split,
            out,
        } => commands::rollout(&cfg, &checkpoint, &anchors, &input, split, out.as_deref()),
        Cmd::Report { files } => commands::report(&files),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
