//! How much the server corpus must cover the client contexts: the noise net
//! is pretrained on a shrinking share of contexts and the aggregated accuracy
//! is reported for each share.
//!
//! cargo run --release --example overlap_sensitivity -- [SEED]

use flmg::experiment::{
    aggregate_all, generate, make_data, method_name, pretrain_diffusion, train_clients,
};
use flmg::federation::evaluate_global;
use flmg::io::config::ExperimentConfig;

fn main() -> flmg::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    for overlap in [1.0, 0.66, 0.33] {
        let mut cfg = ExperimentConfig {
            seed,
            ..Default::default()
        };
        cfg.diffusion.overlap = overlap;
        let data = make_data(&cfg)?;
        let contexts = data.server.contexts();
        let (net, _) = pretrain_diffusion(&cfg, &data.server)?;
        let updates = train_clients(&cfg, &data)?;
        let synth = generate(&cfg, &updates, &net, &cfg.generation.guidance)?;
        let mut line = format!("overlap {overlap:.2} (server contexts {contexts:?})");
        for (kind, model) in aggregate_all(&cfg, &synth, &updates)? {
            line += &format!(
                "  {} {:.1}",
                method_name(kind),
                100.0 * evaluate_global(&model, &data.test_sets())?.average
            );
        }
        println!("{line}");
    }
    Ok(())
}
