//! Pretrains the server's noise predictor, then draws samples for one client
//! with and without guidance from that client's model. Guided samples should
//! be labeled as requested by the client model more often, and sit closer to
//! the client's test distribution (RBF-MMD). A last run keeps every guidance
//! batch to one class: the BN term then pulls each batch toward the client's
//! mixed-class statistics and works against the requested class.
//!
//! cargo run --release --example guided_generation

use flmg::experiment::{make_data, pretrain_diffusion, train_clients};
use flmg::federation::SyntheticRecord;
use flmg::federation::{median_heuristic_gamma, mmd_rbf};
use flmg::guidance::{
    generate_guided, generate_labeled, interleave_labels, self_agreement, GuidanceConfig,
};
use flmg::io::config::ExperimentConfig;
use flmg::nn::Tensor;

fn main() -> flmg::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = make_data(&cfg)?;
    let (net, curve) = pretrain_diffusion(&cfg, &data.server)?;
    println!(
        "noise-prediction loss {:.3} -> {:.3}",
        curve[0],
        curve[curve.len() - 1]
    );
    let updates = train_clients(&cfg, &data)?;
    let sched = cfg.diffusion.schedule.build()?;
    let client = 1;
    let reference = data.clients[client].test.features();
    let gamma = median_heuristic_gamma(&reference)?;

    let guided = cfg.generation.guidance.clone();
    let plain = GuidanceConfig {
        guide_scale: 0.0,
        ..guided.clone()
    };
    let per_class = 64;
    let labels = interleave_labels(
        &(0..cfg.data.num_classes)
            .map(|y| (y, per_class))
            .collect::<Vec<_>>(),
    );
    let model = &updates[client].model;
    let mut runs = Vec::new();
    for (name, g) in [("unguided", &plain), ("guided", &guided)] {
        let x = generate_labeled(&net, model, &labels, &sched, g, 10)?;
        let records: Vec<SyntheticRecord> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| SyntheticRecord {
                x: x.row(i).to_vec(),
                label: y,
                client: Some(client),
            })
            .collect();
        runs.push((name, records));
    }
    let mut single = Vec::new();
    for y in 0..cfg.data.num_classes {
        single.extend(generate_guided(
            &net,
            model,
            client,
            y,
            per_class,
            &sched,
            &guided,
            10 + y as u64,
        )?);
    }
    runs.push(("guided, one class per batch", single));
    for (name, records) in &runs {
        let rows: Vec<f64> = records.iter().flat_map(|r| r.x.iter().copied()).collect();
        let x = Tensor::new(vec![records.len(), net.dim()], rows)?;
        println!(
            "{name:<28} client agreement {:.2}, MMD to client test set {:.4}",
            self_agreement(model, records)?,
            mmd_rbf(&x, &reference, gamma)?
        );
    }
    Ok(())
}
