//! Server-side synthetic dataset construction and the FedLMG ledger.

use super::ledger::CostLedger;
use super::synthetic::{SyntheticDataset, SyntheticRecord};
use super::train::ClientUpdate;
use crate::diffusion::{EpsNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{generate_labeled, interleave_labels, GuidanceConfig};
use crate::rng::derive_seed;

/// For every client and every class in its label set, `per_class` guided
/// samples (or, when `None`, as many as the client trained on). Client `k`
/// generates with seed `derive(seed, k)`; its batches mix its classes.
pub fn build_synthetic(
    updates: &[ClientUpdate],
    net: &EpsNet,
    per_class: Option<usize>,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<SyntheticDataset> {
    let first = updates.first().ok_or(Error::Empty("client update list"))?;
    if per_class == Some(0) {
        return Err(Error::invalid("per-class count must be at least 1"));
    }
    let classes = first.model.num_classes();
    let mut out = SyntheticDataset::new(net.dim(), classes);
    for u in updates {
        if u.model.num_classes() != classes {
            return Err(Error::shape("clients disagree on the class count"));
        }
        let counts: Vec<(usize, usize)> = u
            .label_set()
            .into_iter()
            .map(|y| (y, per_class.unwrap_or(u.class_counts[y])))
            .collect();
        let labels = interleave_labels(&counts);
        let x = generate_labeled(
            net,
            &u.model,
            &labels,
            sched,
            cfg,
            derive_seed(seed, u.client_id as u64),
        )?;
        out.extend(labels.iter().enumerate().map(|(i, &y)| SyntheticRecord {
            x: x.row(i).to_vec(),
            label: y,
            client: Some(u.client_id),
        }))?;
    }
    Ok(out)
}

/// One upload per client of its serialized checkpoint; nothing downloaded.
pub fn fedlmg_ledger(updates: &[ClientUpdate]) -> Result<CostLedger> {
    let n = updates.iter().map(|u| u.client_id + 1).max().unwrap_or(0);
    let mut l = CostLedger::new("FedLMG", n);
    for u in updates {
        l.record_upload(u.client_id, u.upload_params() as u64, u.upload_bytes as u64)?;
        l.record_flops(u.client_id, u.train_flops)?;
    }
    l.end_round();
    Ok(l)
}
