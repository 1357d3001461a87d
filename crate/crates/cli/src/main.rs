use std::path::PathBuf;
use std::process::ExitCode;

use chainplan::bethegap::VerifyConfig;
use chainplan_cli::config::TaskKind;
use chainplan_cli::gap::{cmd_gap_verify, parse_structure, GapOptions};
use chainplan_cli::{compose, eval, train, CliError, ExperimentConfig};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use log::error;

#[derive(Debug, Parser)]
#[command(name = "chainplan", version, about = "Chain-composed diffusion planning experiments")]
struct Args {
    /// Experiment config (TOML). Defaults to the built-in arcs experiment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed; sampling seeds become seed, seed+1, ... (same count).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for seed fan-out (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the chunk denoiser (and the boundary model when needed).
    Train,
    /// Sample plans with the configured sampler for every case and seed.
    Compose,
    /// Sweep message schemes and step counts with the guided sampler.
    Ablate,
    /// Cross-check the two forms of the Bethe gap on random instances.
    GapVerify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Fixed alphabet size (random per trial when omitted).
        #[arg(long)]
        alphabet: Option<usize>,
        /// random, sticky or independent.
        #[arg(long, default_value = "random")]
        structure: String,
        /// Flip-channel strength as a fraction of its maximum (random
        /// channel when omitted).
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Recompute metrics from a compose run and apply acceptance checks.
    Eval,
}

fn load_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(TaskKind::Arcs),
    };
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: Args) -> Result<(), CliError> {
    match &args.command {
        Command::Train => {
            let cfg = load_config(&args)?;
            let out = train::cmd_train(&cfg)?;
            for f in &out.files {
                println!("{}", f.display());
            }
        }
        Command::Compose => {
            let cfg = load_config(&args)?;
            compose::cmd_compose(&cfg, args.threads)?;
            println!("{}", compose::summary_path(&cfg, cfg.sampler.kind).display());
        }
        Command::Ablate => {
            let cfg = load_config(&args)?;
            let out = compose::cmd_ablate(&cfg, args.threads)?;
            println!("scheme,steps,runs,median_residual,success_rate");
            for c in &out.cells {
                println!(
                    "{},{},{},{:.6},{:.3}",
                    c.scheme, c.steps, c.runs, c.median_residual, c.success_rate
                );
            }
        }
        Command::GapVerify {
            trials,
            alphabet,
            structure,
            strength,
        } => {
            let opts = GapOptions {
                verify: VerifyConfig {
                    trials: *trials,
                    alphabet: *alphabet,
                    structure: parse_structure(structure)?,
                    strength: *strength,
                    seed: args.seed.unwrap_or(0),
                },
                out: args.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            };
            let out = cmd_gap_verify(&opts)?;
            println!(
                "max_abs_diff={:e} max_abs_delta={:e} trials={} skipped={}",
                out.report.max_abs_diff(),
                out.report.max_abs_delta(),
                out.report.rows.len(),
                out.report.skipped.len()
            );
        }
        Command::Eval => {
            let cfg = load_config(&args)?;
            let out = eval::cmd_eval(&cfg)?;
            println!(
                "runs={} median_residual={:.6} success_rate={:.3}",
                out.rows.len(),
                out.median_residual,
                out.success_rate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; clap's own code 2 would read
            // as a numerical failure.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
