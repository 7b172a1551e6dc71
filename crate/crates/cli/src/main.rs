//! `wglasdi` command-line driver.
//!
//! Exit status: 0 on success, 2 for configuration or input errors, 3 when the
//! numerics fail (solver, divergence, unstable rollout).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wglasdi::trainer::LossMode;

use commands::{HeatmapKind, Run, CONFIG_FILE};
use config::{preset, strong_variant, ExperimentConfig, PRESETS};
use error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "wglasdi",
    version,
    about = "Weak-form greedy latent-space dynamics identification"
)]
struct Cli {
    /// Worker threads for data-parallel work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in config by name; see `wglasdi presets`.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory. Its config.json is used when neither --config nor
    /// --preset is given.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Root seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
    /// Loss variant. `strong` also switches the coefficient penalty off.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<LossMode>,
}

fn parse_mode(s: &str) -> std::result::Result<LossMode, String> {
    match s {
        "strong" => Ok(LossMode::Strong),
        "weakTypeI" => Ok(LossMode::WeakTypeI),
        "weakTypeII" => Ok(LossMode::WeakTypeII),
        _ => Err(format!(
            "unknown mode {s:?} (strong, weakTypeI, weakTypeII)"
        )),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve the FOM at the initial samples and store the noisy dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Noise level override (fraction of the data RMS).
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train on the run's dataset, sampling greedily up to the budget.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file instead of <out>/dataset.bin.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Error heatmap over the test grid, summary and speedup report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// ROM prediction at one parameter point, written as CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Parameter point, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        mu: Vec<f64>,
        /// Output file instead of <out>/prediction.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Error or indicator heatmap over the test grid.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "error")]
        kind: HeatmapKind,
    },
    /// List presets, or print one as JSON.
    Presets { name: Option<String> },
}

fn resolve(c: &Common, noise: Option<f64>) -> Result<Run> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            let p = c.out.join(CONFIG_FILE);
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "no --config or --preset given and {} does not exist",
                    p.display()
                )));
            }
            ExperimentConfig::load(&p)?
        }
    };
    if let Some(mode) = c.mode {
        cfg = if mode == LossMode::Strong {
            strong_variant(cfg)
        } else {
            cfg.train.mode = mode;
            cfg
        };
    }
    if let Some(n) = noise {
        cfg.noise_level = n;
    }
    let seed = c.seed.unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(Run {
        config: cfg,
        dir: c.out.clone(),
        force: c.force,
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        wglasdi::par::init_threads(n);
    }
    match cli.command {
        Command::Generate { common, noise } => {
            commands::generate(&resolve(&common, noise)?)?;
        }
        Command::Train {
            common,
            dataset,
            resume,
        } => {
            commands::train(
                &resolve(&common, None)?,
                dataset.as_deref(),
                resume.as_deref(),
            )?;
        }
        Command::Evaluate { common, model } => {
            commands::evaluate(&resolve(&common, None)?, model.as_deref())?;
        }
        Command::Predict {
            common,
            model,
            mu,
            output,
        } => {
            commands::predict(
                &resolve(&common, None)?,
                model.as_deref(),
                &mu,
                output.as_deref(),
            )?;
        }
        Command::Heatmap {
            common,
            model,
            kind,
        } => {
            commands::heatmap(&resolve(&common, None)?, model.as_deref(), kind)?;
        }
        Command::Presets { name: None } => {
            for p in PRESETS {
                println!("{p}");
            }
        }
        Command::Presets { name: Some(n) } => println!("{}", preset(&n)?.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
