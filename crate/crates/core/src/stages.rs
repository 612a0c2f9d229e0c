//! File-backed pipeline stages: each reads its inputs from a run directory
//! and writes its outputs there, so stages can be run one at a time.

use std::fs;
use std::str::FromStr;

use crate::data::{ClientData, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{
    aggregate_all, evaluate_run, generate, make_data, pretrain_diffusion, train_clients,
    write_clients, write_config, write_data, write_globals, write_metrics, DataBundle, RunDir,
};
use crate::federation::{ClientUpdate, StrategyKind};
use crate::io::checkpoint::load_checkpoint;
use crate::io::config::ExperimentConfig;
use crate::io::dataset_file::{load_dataset, load_synthetic, save_synthetic};
use crate::io::epsnet_file::{load_epsnet, save_epsnet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    MakeData,
    PretrainDiffusion,
    ClientTrain,
    Generate,
    Aggregate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::MakeData,
        Stage::PretrainDiffusion,
        Stage::ClientTrain,
        Stage::Generate,
        Stage::Aggregate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::MakeData => "make-data",
            Stage::PretrainDiffusion => "pretrain-diffusion",
            Stage::ClientTrain => "client-train",
            Stage::Generate => "generate",
            Stage::Aggregate => "aggregate",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Stage::from_str)
        .collect()
}

fn load_data(cfg: &ExperimentConfig, dir: &RunDir) -> Result<DataBundle> {
    let clients = (0..cfg.num_clients())
        .map(|k| {
            Ok(ClientData {
                train: load_dataset(dir.client_train(k))?,
                test: load_dataset(dir.client_test(k))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DataBundle {
        clients,
        server: load_dataset(dir.server_corpus())?,
    })
}

fn load_updates(
    cfg: &ExperimentConfig,
    dir: &RunDir,
    trains: &[&Dataset],
) -> Result<Vec<ClientUpdate>> {
    (0..cfg.num_clients())
        .map(|k| {
            let (model, meta) = load_checkpoint(dir.client_checkpoint(k))?;
            ClientUpdate::from_checkpoint(
                model,
                &meta,
                cfg.client_arch(k),
                trains[k],
                &cfg.clients.train,
            )
        })
        .collect()
}

pub fn run_stage(cfg: &ExperimentConfig, dir: &RunDir, stage: Stage) -> Result<()> {
    let go = || -> Result<()> {
        match stage {
            Stage::MakeData => {
                dir.create()?;
                write_config(cfg, dir)?;
                write_data(&make_data(cfg)?, dir)
            }
            Stage::PretrainDiffusion => {
                let server = load_dataset(dir.server_corpus())?;
                let (net, curve) = pretrain_diffusion(cfg, &server)?;
                save_epsnet(&net, dir.epsnet())?;
                fs::write(dir.eps_curve(), serde_json::to_string(&curve)?)?;
                Ok(())
            }
            Stage::ClientTrain => {
                let data = load_data(cfg, dir)?;
                write_clients(&train_clients(cfg, &data)?, dir)
            }
            Stage::Generate => {
                let data = load_data(cfg, dir)?;
                let updates = load_updates(cfg, dir, &data.train_sets())?;
                let net = load_epsnet(dir.epsnet())?;
                save_synthetic(
                    &generate(cfg, &updates, &net, &cfg.generation.guidance)?,
                    dir.synthetic(),
                )
            }
            Stage::Aggregate => {
                let data = load_data(cfg, dir)?;
                let updates = load_updates(cfg, dir, &data.train_sets())?;
                let synth = load_synthetic(dir.synthetic())?;
                write_globals(cfg, &aggregate_all(cfg, &synth, &updates)?, dir)
            }
            Stage::Evaluate => {
                let data = load_data(cfg, dir)?;
                let updates = load_updates(cfg, dir, &data.train_sets())?;
                let net = load_epsnet(dir.epsnet())?;
                let synth = load_synthetic(dir.synthetic())?;
                let globals = cfg
                    .aggregation
                    .strategies
                    .iter()
                    .map(|&k: &StrategyKind| Ok((k, load_checkpoint(dir.global_checkpoint(k))?.0)))
                    .collect::<Result<Vec<_>>>()?;
                let curve: Vec<f64> = match fs::read_to_string(dir.eps_curve()) {
                    Ok(s) => serde_json::from_str(&s)?,
                    Err(_) => Vec::new(),
                };
                let (metrics, ledgers) =
                    evaluate_run(cfg, &data, &net, &updates, &synth, &globals, &curve)?;
                write_metrics(&metrics, &ledgers, dir)
            }
        }
    };
    go().map_err(|e| e.in_stage(stage.name()))
}

pub fn run_stages(cfg: &ExperimentConfig, dir: &RunDir, stages: &[Stage]) -> Result<()> {
    cfg.validate()?;
    for &s in stages {
        run_stage(cfg, dir, s)?;
    }
    Ok(())
}
