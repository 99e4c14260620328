mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use marich_core::attack::SamplerKind;
use marich_server::DEFAULT_MAX_BATCH;
use tracing_subscriber::EnvFilter;

use commands::{AttackOverrides, EvaluateOverrides, Failure, ServeArgs, TrainOverrides};
use config::{ExperimentConfig, CONFIG_KEYS};

const EXIT_CODES: &str = "EXIT CODES\n  0  success, including attacks truncated by a query cap\n  2  config error\n  3  runtime or transport error";

#[derive(Parser)]
#[command(
    name = "marich",
    version,
    about = "Label-only model extraction toolkit"
)]
#[command(after_long_help = concat_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn concat_help() -> String {
    format!("{CONFIG_KEYS}\n{EXIT_CODES}")
}

fn parse_sampler(s: &str) -> Result<SamplerKind, String> {
    SamplerKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = SamplerKind::ALL.iter().map(|k| k.name()).collect();
            format!(
                "unknown sampler {s:?}; expected one of {}",
                names.join(", ")
            )
        })
}

#[derive(Subcommand)]
enum Command {
    /// Train a target model and record its test accuracy.
    #[command(after_long_help = concat_help())]
    TrainTarget {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`; the target is read from here too.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Train with DP-SGD.
        #[arg(long)]
        dpsgd: bool,
        /// Per-example gradient clip C.
        #[arg(long, requires = "dpsgd")]
        clip_norm: Option<f64>,
        /// Noise multiplier σ.
        #[arg(long, requires = "dpsgd")]
        noise_multiplier: Option<f64>,
    },
    /// Serve a target model over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Target model file written by train-target.
        #[arg(long)]
        model: PathBuf,
        /// Maximum total instances answered.
        #[arg(long)]
        cap: Option<u64>,
        /// Laplace output perturbation budget.
        #[arg(long)]
        dp_epsilon: Option<f64>,
        /// Laplace sensitivity Δ.
        #[arg(long, default_value_t = 2.0)]
        dp_sensitivity: f64,
        /// Seed for the Laplace draws.
        #[arg(long, default_value_t = 0)]
        dp_noise_seed: u64,
        /// Serve /v1/probs (evaluation deployments only).
        #[arg(long)]
        expose_probs: bool,
        /// Largest batch one request may carry.
        #[arg(long, default_value_t = DEFAULT_MAX_BATCH)]
        max_batch: usize,
    },
    /// Run an extraction attack and write its trace.
    #[command(after_long_help = concat_help())]
    Attack {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`; the target is read from here too.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `attack.sampler`.
        #[arg(long, value_parser = parse_sampler)]
        sampler: Option<SamplerKind>,
        /// Overrides `attack.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Attack a served target instead of the model file.
        #[arg(long)]
        target_url: Option<String>,
    },
    /// Compare the extracted model with the target.
    #[command(after_long_help = concat_help())]
    Evaluate {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`; the target is read from here too.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Evaluate against a served target.
        #[arg(long)]
        target_url: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    let load = |p: &PathBuf| ExperimentConfig::load(p).map_err(Failure::from);
    match cli.command {
        Command::TrainTarget {
            config,
            output_dir,
            dpsgd,
            clip_norm,
            noise_multiplier,
        } => commands::train_target(
            load(&config)?,
            TrainOverrides {
                output_dir,
                dpsgd,
                clip_norm,
                noise_multiplier,
            },
        ),
        Command::Serve {
            bind,
            model,
            cap,
            dp_epsilon,
            dp_sensitivity,
            dp_noise_seed,
            expose_probs,
            max_batch,
        } => commands::serve(ServeArgs {
            bind,
            model,
            cap,
            dp_epsilon,
            dp_sensitivity,
            dp_noise_seed,
            expose_probs,
            max_batch,
        }),
        Command::Attack {
            config,
            output_dir,
            sampler,
            seed,
            target_url,
        } => commands::attack(
            load(&config)?,
            AttackOverrides {
                output_dir,
                sampler,
                seed,
                target_url,
            },
        )
        .map(|_| ()),
        Command::Evaluate {
            config,
            output_dir,
            target_url,
        } => commands::evaluate(
            load(&config)?,
            EvaluateOverrides {
                output_dir,
                target_url,
            },
        )
        .map(|_| ()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
