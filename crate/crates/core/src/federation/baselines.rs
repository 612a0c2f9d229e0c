//! Reference methods: multi-round FedAvg, class-prompt-only generation, and
//! centralized training on pooled data.

use serde::{Deserialize, Serialize};

use super::ledger::CostLedger;
use super::synthetic::{SyntheticDataset, SyntheticRecord};
use super::train::{init_model, local_train, shuffle_stream, ClientUpdate, TrainConfig, Trainer};
use crate::data::Dataset;
use crate::diffusion::{sample, EpsNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::io::checkpoint::checkpoint_size;
use crate::io::dataset_file::record_bytes;
use crate::nn::{Architecture, ClassifierModel};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Client weight `N_k / Σ N`.
    #[default]
    BySize,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgConfig {
    pub rounds: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default)]
    pub weighting: Weighting,
    pub train: TrainConfig,
}

fn one() -> usize {
    1
}

/// Overwrites `dst`'s weights and BN statistics with `src`'s.
fn load_state(dst: &mut ClassifierModel, src: &ClassifierModel) {
    dst.params_mut().copy_from_slice(src.params());
    for (d, s) in dst.bn_stats_mut().iter_mut().zip(src.bn_stats()) {
        d.mean.copy_from_slice(&s.mean);
        d.var.copy_from_slice(&s.var);
    }
}

/// Broadcast → local epochs → weighted parameter (and BN statistic)
/// average, for `rounds` rounds. Clients keep their optimizer state and
/// shuffle streams across rounds.
pub fn fedavg_baseline(
    clients: &[&Dataset],
    archs: &[Architecture],
    cfg: &FedAvgConfig,
    seed: u64,
) -> Result<(ClassifierModel, CostLedger)> {
    let k = clients.len();
    if k == 0 {
        return Err(Error::Empty("client list"));
    }
    if archs.len() != k {
        return Err(Error::shape("one architecture per client is required"));
    }
    if archs.iter().any(|a| a != &archs[0]) {
        return Err(Error::Heterogeneous(
            "FedAvg averages parameters and needs one shared architecture".into(),
        ));
    }
    let arch = &archs[0];
    if clients.iter().any(|c| c.is_empty()) {
        return Err(Error::Empty("client dataset"));
    }
    let total: usize = clients.iter().map(|c| c.len()).sum();
    let weights: Vec<f64> = match cfg.weighting {
        Weighting::BySize => clients
            .iter()
            .map(|c| c.len() as f64 / total as f64)
            .collect(),
        Weighting::Uniform => vec![1.0 / k as f64; k],
    };
    let mut global = init_model(arch, seed)?;
    let params = (global.param_count() + global.bn_stat_count()) as u64;
    let bytes = checkpoint_size(&global) as u64;
    let mut trainers = (0..k)
        .map(|i| Trainer::new(global.clone(), &cfg.train, shuffle_stream(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut ledger = CostLedger::new("FedAvg", k);
    for _ in 0..cfg.rounds {
        for (i, tr) in trainers.iter_mut().enumerate() {
            load_state(&mut tr.model, &global);
            ledger.record_download(i, params, bytes)?;
            let before = tr.flops();
            for _ in 0..cfg.local_epochs {
                tr.epoch(clients[i], None)?;
            }
            ledger.record_flops(i, tr.flops() - before)?;
            ledger.record_upload(i, params, bytes)?;
        }
        let mut avg_params: Vec<f64> = trainers[0]
            .model
            .params()
            .iter()
            .map(|p| weights[0] * p)
            .collect();
        let mut avg_stats = trainers[0].model.extract_bn_stats();
        for s in &mut avg_stats {
            s.mean.iter_mut().for_each(|v| *v *= weights[0]);
            s.var.iter_mut().for_each(|v| *v *= weights[0]);
        }
        for (tr, &w) in trainers.iter().zip(&weights).skip(1) {
            for (a, p) in avg_params.iter_mut().zip(tr.model.params()) {
                *a += w * p;
            }
            for (a, s) in avg_stats.iter_mut().zip(tr.model.bn_stats()) {
                a.mean
                    .iter_mut()
                    .zip(&s.mean)
                    .for_each(|(x, y)| *x += w * y);
                a.var.iter_mut().zip(&s.var).for_each(|(x, y)| *x += w * y);
            }
        }
        global.params_mut().copy_from_slice(&avg_params);
        global.bn_stats_mut().clone_from_slice(&avg_stats);
        ledger.end_round();
    }
    Ok((global, ledger))
}

/// Class-conditional sampling with no client model: class `y` draws `n`
/// samples with seed `derive(seed, y)`. Nothing is communicated.
pub fn prompts_only_baseline(
    net: &EpsNet,
    classes: &[usize],
    n: usize,
    sched: &NoiseSchedule,
    seed: u64,
    num_clients: usize,
) -> Result<(SyntheticDataset, CostLedger)> {
    let mut out = SyntheticDataset::new(net.dim(), net.num_classes());
    for &y in classes {
        let x = sample(net, sched, Some(y), n, derive_seed(seed, y as u64))?;
        out.extend((0..n).map(|i| SyntheticRecord {
            x: x.row(i).to_vec(),
            label: y,
            client: None,
        }))?;
    }
    Ok((out, CostLedger::new("Prompts Only", num_clients)))
}

/// Centralized training on the union of client train sets (client order).
/// Each client uploads its raw data once.
pub fn ceiling_baseline(
    clients: &[&Dataset],
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ClientUpdate, CostLedger)> {
    let pooled = Dataset::concat(clients)?;
    if pooled.is_empty() {
        return Err(Error::Empty("pooled data"));
    }
    let mut ledger = CostLedger::new("Ceiling", clients.len());
    for (i, c) in clients.iter().enumerate() {
        ledger.record_upload(
            i,
            (c.len() * c.dim) as u64,
            (c.len() * record_bytes(c.dim)) as u64,
        )?;
    }
    ledger.end_round();
    Ok((local_train(0, &pooled, arch, cfg, seed)?, ledger))
}
