//! Which guidance terms matter: no guidance, BN statistics only, cross-entropy
//! only, and both, each followed by every aggregation strategy.
//!
//! cargo run --release --example loss_ablation -- [SEED]

use flmg::experiment::{aggregate_all, generate, make_data, pretrain_diffusion, train_clients};
use flmg::federation::evaluate_global;
use flmg::guidance::GuidanceConfig;
use flmg::io::config::ExperimentConfig;

fn main() -> flmg::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let cfg = ExperimentConfig {
        seed,
        ..Default::default()
    };
    let data = make_data(&cfg)?;
    let (net, _) = pretrain_diffusion(&cfg, &data.server)?;
    let updates = train_clients(&cfg, &data)?;
    let full = cfg.generation.guidance.clone();
    let variants = [
        (
            "none",
            GuidanceConfig {
                guide_scale: 0.0,
                ..full.clone()
            },
        ),
        (
            "BN only",
            GuidanceConfig {
                ce_weight: 0.0,
                ..full.clone()
            },
        ),
        (
            "CE only",
            GuidanceConfig {
                lambda_bn: 0.0,
                ..full.clone()
            },
        ),
        ("CE + BN", full),
    ];
    for (name, g) in &variants {
        let synth = generate(&cfg, &updates, &net, g)?;
        let mut line = format!("{name:<8}");
        for (kind, model) in aggregate_all(&cfg, &synth, &updates)? {
            line += &format!(
                "  {} {:.1}",
                kind.tag(),
                100.0 * evaluate_global(&model, &data.test_sets())?.average
            );
        }
        println!("{line}");
    }
    Ok(())
}
