//! The full one-shot run with every baseline, written to a run directory and
//! summarized as accuracy and communication tables.
//!
//! cargo run --release --example one_shot_pipeline -- [SEED] [OUT_DIR]

use std::path::PathBuf;

use flmg::experiment::run_experiment;
use flmg::io::config::ExperimentConfig;
use flmg::report::emit_report;

fn main() -> flmg::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args
        .next()
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("runs/example-seed-{seed}")));
    let cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    run_experiment(&cfg, &out)?;
    println!("{}", emit_report(&out)?);
    println!("run directory: {}", out.display());
    Ok(())
}
