//! Communication and client-compute cost of one-shot uploads against FedAvg
//! for a few round counts. No diffusion model is needed for the accounting.
//!
//! cargo run --release --example communication_ledger

use flmg::experiment::{make_data, train_clients};
use flmg::federation::{
    fedavg_baseline, fedlmg_ledger, ledger_report, FedAvgConfig, LedgerReport, Weighting,
};
use flmg::io::config::ExperimentConfig;

fn line(name: &str, r: &LedgerReport) {
    println!(
        "{name:<12}{:>12.4}{:>12.4}{:>12.4}{:>12}{:>14.4}",
        r.upload_params as f64 / 1e6,
        r.download_params as f64 / 1e6,
        r.total_params as f64 / 1e6,
        r.rounds,
        r.train_flops as f64 / 1e9
    );
}

fn main() -> flmg::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = make_data(&cfg)?;
    let updates = train_clients(&cfg, &data)?;
    println!(
        "{:<12}{:>12}{:>12}{:>12}{:>12}{:>14}",
        "method", "up (M)", "down (M)", "total (M)", "rounds", "flops (G)"
    );
    line("FedLMG", &ledger_report(&fedlmg_ledger(&updates)?));
    let archs: Vec<_> = (0..updates.len()).map(|k| cfg.client_arch(k)).collect();
    for rounds in [1, 5, 20] {
        let fa = FedAvgConfig {
            rounds,
            local_epochs: 1,
            weighting: Weighting::BySize,
            train: cfg.clients.train.clone(),
        };
        let (_, ledger) = fedavg_baseline(&data.train_sets(), &archs, &fa, 7)?;
        line(&format!("FedAvg R={rounds}"), &ledger_report(&ledger));
    }
    Ok(())
}
