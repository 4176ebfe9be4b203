mod commands;
mod config;
mod error;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use taco_core::policy::SensorMode;
use taco_core::rollout::EnvKind;

use commands::{dataset, repeat, rollout, train};
use error::Result;

#[derive(Parser, Debug)]
#[command(name = "taco", version, about = "Visuotactile imitation learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Episode directory utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Normalization statistics of a dataset as JSON.
    NormStats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<SensorMode>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: $TACO_RUNS_DIR/train-<hash>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Offline action error of a checkpoint on held-out episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop receding-horizon rollouts in a toy environment.
    Rollout {
        /// Trained checkpoint; the scripted expert is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_env, default_value = "pickplace")]
        env: EnvKind,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Actions executed per query (default: the checkpoint's exec_len).
        #[arg(long)]
        exec_len: Option<usize>,
        #[arg(long)]
        max_ticks: Option<usize>,
        /// Record a contact microphone.
        #[arg(long)]
        mic: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Record scripted-expert demonstrations as dataset episodes.
    CollectDemos {
        #[arg(long, value_parser = parse_env, default_value = "pickplace")]
        env: EnvKind,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        mic: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute a finished run's provenance hash.
    Verify { run: PathBuf },
    /// Sensor repeatability protocol.
    Repeat {
        #[command(subcommand)]
        command: RepeatCommand,
    },
}

#[derive(Subcommand, Debug)]
enum DatasetCommand {
    /// Print manifests, per-stream ranges and invariant checks.
    Inspect { dir: PathBuf },
}

#[derive(Subcommand, Debug)]
enum RepeatCommand {
    /// Response time, spread and drift of recorded press/release episodes.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "default", value_parser = ["default", "acoustic"])]
        protocol: String,
        #[arg(long)]
        sensor: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the protocol with a synthetic sensor model file.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "default", value_parser = ["default", "acoustic"])]
        protocol: String,
        /// Overrides the protocol's episode count.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<SensorMode, String> {
    s.parse()
}

fn parse_env(s: &str) -> std::result::Result<EnvKind, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Inspect { dir },
        } => dataset::inspect(&dir),
        Command::NormStats { data, out } => dataset::norm_stats(&data, out.as_deref()),
        Command::Train { config, mode, seed, out } => train::run_train(train::TrainArgs { config, mode, seed, out }).map(drop),
        Command::Eval { checkpoint, data, stride, out } => train::run_eval(&checkpoint, &data, stride, out.as_deref()).map(drop),
        Command::Rollout {
            checkpoint,
            env,
            episodes,
            seed,
            exec_len,
            max_ticks,
            mic,
            out,
        } => rollout::run_rollout(rollout::RolloutArgs {
            checkpoint,
            env,
            episodes,
            seed,
            exec_len,
            max_ticks,
            mic,
            out,
        })
        .map(drop),
        Command::CollectDemos { env, episodes, seed, mic, out } => rollout::run_collect(env, episodes, seed, mic, &out),
        Command::Verify { run } => {
            if run_dir::Provenance::verify(&run)? {
                println!("ok {}", run.display());
                Ok(())
            } else {
                Err(error::CliError::new("provenance", format!("{} does not match its recorded hash", run.display())))
            }
        }
        Command::Repeat { command } => match command {
            RepeatCommand::Analyze { input, protocol, sensor, out } => repeat::run_analyze(&input, &protocol, sensor.as_deref(), out.as_deref()).map(drop),
            RepeatCommand::Simulate {
                model,
                protocol,
                episodes,
                seed,
                out,
            } => repeat::run_simulate(&model, &protocol, episodes, seed, out.as_deref()).map(drop),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::FAILURE
        }
    }
}
