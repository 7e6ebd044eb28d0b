//! `dpms generate | fit | eval`.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{cmd_eval, cmd_fit, cmd_generate, FitMode, RunRecord, FA_SPLITS, LINEAR_SPLITS, RUN_CONFIG_FILE, RUN_FILE, SIM_BRAIN_SPLITS};
pub use config::{Experiment, FaRun, LinearRun, RunConfig, RUN_CONFIG_SCHEMA};

use crate::error::{DpmsError, Result};

#[derive(Debug, Parser)]
#[command(name = "dpms", version, about = "Synthesize probabilistic models across system instances")]
pub struct Cli {
    /// Worker threads (falls back to DPMS_THREADS, then all cores).
    #[arg(long, global = true, env = "DPMS_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Synthesize,
    Isolated,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Experiment when no config is given.
        #[arg(long, value_parser = parse_experiment)]
        experiment: Option<Experiment>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a model to a generated dataset.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "synthesize")]
        mode: ModeArg,
        /// Dataset position of the instance for `--mode isolated`.
        #[arg(long)]
        instance: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a fit and write metrics.json / metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "test")]
        splits: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_experiment(s: &str) -> std::result::Result<Experiment, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown experiment {s:?}"))
}

fn run_config(path: &Option<PathBuf>, experiment: Option<Experiment>) -> Result<RunConfig> {
    match (path, experiment) {
        (Some(p), _) => RunConfig::load(p),
        (None, Some(e)) => Ok(RunConfig::new(e)),
        (None, None) => Err(DpmsError::Config("either --config or --experiment is required".into())),
    }
}

fn output(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    cfg.output
        .clone()
        .or(flag)
        .ok_or_else(|| DpmsError::Config("no output directory: pass --out or set \"output\"".into()))
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DpmsError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate {
            config,
            experiment,
            seed,
            out,
        } => {
            let cfg = run_config(&config, experiment)?;
            let out = output(out, &cfg)?;
            cmd_generate(&cfg, seed, &out)?;
        }
        Command::Fit {
            config,
            data,
            mode,
            instance,
            seed,
            out,
            resume,
        } => {
            let cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => commands_config_from_data(&data)?,
            };
            let out = output(out, &cfg)?;
            let mode = match (mode, instance) {
                (ModeArg::Synthesize, None) => FitMode::Synthesize,
                (ModeArg::Isolated, Some(i)) => FitMode::Isolated(i),
                (ModeArg::Isolated, None) => return Err(DpmsError::Config("--mode isolated needs --instance".into())),
                (ModeArg::Synthesize, Some(_)) => return Err(DpmsError::Config("--instance applies only to --mode isolated".into())),
            };
            cmd_fit(&cfg, seed, &data, mode, &out, resume)?;
        }
        Command::Eval {
            checkpoint,
            data,
            splits,
            out,
        } => {
            cmd_eval(&checkpoint, &data, &splits, &out)?;
        }
    }
    Ok(())
}

/// The config a dataset was generated with.
fn commands_config_from_data(data: &std::path::Path) -> Result<RunConfig> {
    RunConfig::load(&data.join(RUN_CONFIG_FILE))
}
