//! Fine-tuning, multi-teacher and specific-teacher aggregation on the same
//! synthetic data, under feature skew and under Dirichlet label skew.
//!
//! cargo run --release --example aggregation_strategies -- [SEED]

use flmg::experiment::{
    aggregate_all, generate, make_data, method_name, pretrain_diffusion, train_clients,
};
use flmg::federation::evaluate_global;
use flmg::io::config::{ExperimentConfig, PartitionConfig};

fn main() -> flmg::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("seed must be an integer"))
        .unwrap_or(0);
    let feature = ExperimentConfig {
        seed,
        ..Default::default()
    };
    let label = ExperimentConfig {
        partition: PartitionConfig::LabelSkew {
            num_clients: 4,
            alpha: 0.1,
            context: 0,
        },
        ..feature.clone()
    };
    // the server corpus does not depend on the partition, so one noise net serves both
    let (net, _) = pretrain_diffusion(&feature, &make_data(&feature)?.server)?;
    for (name, cfg) in [("feature skew", &feature), ("label skew", &label)] {
        let data = make_data(cfg)?;
        let updates = train_clients(cfg, &data)?;
        for u in &updates {
            println!(
                "{name}: client {} class counts {:?}",
                u.client_id, u.class_counts
            );
        }
        let synth = generate(cfg, &updates, &net, &cfg.generation.guidance)?;
        for (kind, model) in aggregate_all(cfg, &synth, &updates)? {
            let e = evaluate_global(&model, &data.test_sets())?;
            let per: Vec<String> = e
                .per_client
                .iter()
                .map(|v| format!("{:.1}", 100.0 * v))
                .collect();
            println!(
                "{name}: {:<10} avg {:.1}  per client {per:?}",
                method_name(kind),
                100.0 * e.average
            );
        }
    }
    Ok(())
}
