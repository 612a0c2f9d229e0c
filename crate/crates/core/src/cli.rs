//! Command-line front end. The binary in `src/bin/flmg.rs` only calls [`main_with_args`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiment::{run_experiment, RunDir};
use crate::io::config::ExperimentConfig;
use crate::report::emit_report;
use crate::stages::{parse_stages, run_stage, run_stages, Stage};
use crate::theory::verify_theory;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "flmg",
    about = "One-shot federated learning with client-guided diffusion, at desk scale"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML). Defaults to the built-in benchmark.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory (or output file for verify-theory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated stages for run-experiment.
    #[arg(long, global = true)]
    pub stages: Option<String>,
    /// Worker threads; falls back to FLMG_THREADS.
    #[arg(long, global = true, env = "FLMG_THREADS")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    MakeData,
    PretrainDiffusion,
    ClientTrain,
    Generate,
    Aggregate,
    Evaluate,
    RunExperiment,
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        worlds: usize,
        #[arg(long, default_value_t = 64)]
        max_size: usize,
    },
    /// Prints the tables of a finished run directory.
    Report,
    /// Prints the default config as TOML.
    DefaultConfig,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &ExperimentConfig) -> RunDir {
    let root = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("runs/seed-{}", cfg.seed)));
    RunDir::new(root)
}

pub fn execute(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.common.threads {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let single = |stage: Stage| -> Result<String> {
        let cfg = load_config(&cli.common)?;
        let dir = run_dir(&cli.common, &cfg);
        run_stage(&cfg, &dir, stage)?;
        Ok(format!("{} done in {}", stage.name(), dir.root.display()))
    };
    match &cli.command {
        Command::MakeData => single(Stage::MakeData),
        Command::PretrainDiffusion => single(Stage::PretrainDiffusion),
        Command::ClientTrain => single(Stage::ClientTrain),
        Command::Generate => single(Stage::Generate),
        Command::Aggregate => single(Stage::Aggregate),
        Command::Evaluate => single(Stage::Evaluate),
        Command::RunExperiment => {
            let cfg = load_config(&cli.common)?;
            let dir = run_dir(&cli.common, &cfg);
            match &cli.common.stages {
                Some(list) => run_stages(&cfg, &dir, &parse_stages(list)?)?,
                None => {
                    run_experiment(&cfg, &dir.root)?;
                }
            }
            emit_report(&dir.root).or_else(|_| Ok(format!("stages done in {}", dir.root.display())))
        }
        Command::VerifyTheory { worlds, max_size } => {
            let seed = cli.common.seed.unwrap_or(0);
            let report = verify_theory(*worlds, *max_size, seed)?;
            let json = serde_json::to_string_pretty(&report)?;
            let summary = format!(
                "{} worlds, {} counterexamples, {} violations with the reversed divergence",
                worlds, report.counterexamples, report.printed_direction_violations
            );
            match &cli.common.out {
                Some(p) => {
                    std::fs::write(p, json)?;
                    Ok(summary)
                }
                None => Ok(format!("{json}\n{summary}")),
            }
        }
        Command::Report => {
            let out = cli
                .common
                .out
                .as_ref()
                .ok_or_else(|| Error::Config("report needs --out RUN_DIR".into()))?;
            emit_report(out)
        }
        Command::DefaultConfig => ExperimentConfig::default().to_toml_string(),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Stage { source, .. } if matches!(**source, Error::Config(_)) => EXIT_CONFIG,
        _ => EXIT_STAGE,
    }
}

/// Parses `args`, runs the command, prints its output; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            println!("{text}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
