//! End-to-end pipeline: data → diffusion pretraining → client training →
//! guided generation → aggregation → evaluation, plus the baselines.
//!
//! Every stage is a pure function of the config; all randomness comes from
//! streams derived from `cfg.seed` (see [`seeds`]). [`run_experiment`] runs
//! the stages in memory and writes a self-describing run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    make_corpus, partition_feature_skew, partition_label_skew, server_corpus, ClientData, Dataset,
};
use crate::diffusion::{train_epsnet, EpsNet};
use crate::error::{Error, Result};
use crate::federation::{
    accuracy, aggregate, build_synthetic, ceiling_baseline, evaluate_global, fedavg_baseline,
    fedlmg_ledger, ledger_report, local_train, median_heuristic_gamma, memorization_ratio, mmd_rbf,
    prompts_only_baseline, AggregationStrategy, ClientCost, ClientUpdate, CostLedger, FedAvgConfig,
    LedgerReport, StrategyKind, SyntheticDataset,
};
use crate::guidance::{self_agreement, GuidanceConfig};
use crate::io::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::io::config::{ExperimentConfig, PartitionConfig};
use crate::io::dataset_file::{save_dataset, save_synthetic};
use crate::io::epsnet_file::save_epsnet;
use crate::nn::ClassifierModel;
use crate::rng::{self, derive_seed};

/// Indices of the per-stage seed streams derived from the experiment seed.
pub mod seeds {
    pub const DATA: u64 = 0;
    pub const PARTITION: u64 = 1;
    pub const DIFFUSION: u64 = 2;
    pub const CLIENTS: u64 = 3;
    pub const GENERATION: u64 = 4;
    pub const AGGREGATION: u64 = 5;
    pub const PROMPTS: u64 = 6;
    pub const FEDAVG: u64 = 7;
}

pub fn stage_seed(cfg: &ExperimentConfig, stage: u64) -> u64 {
    derive_seed(cfg.seed, stage)
}

pub struct DataBundle {
    pub clients: Vec<ClientData>,
    pub server: Dataset,
}

impl DataBundle {
    pub fn train_sets(&self) -> Vec<&Dataset> {
        self.clients.iter().map(|c| &c.train).collect()
    }

    pub fn test_sets(&self) -> Vec<&Dataset> {
        self.clients.iter().map(|c| &c.test).collect()
    }
}

pub fn make_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let mut data_cfg = cfg.data.clone();
    data_cfg.seed = stage_seed(cfg, seeds::DATA);
    let corpus = make_corpus(&data_cfg)?;
    let part_seed = stage_seed(cfg, seeds::PARTITION);
    let clients = match cfg.partition {
        PartitionConfig::FeatureSkew { num_clients } => {
            partition_feature_skew(&corpus, num_clients, part_seed)?
        }
        PartitionConfig::LabelSkew {
            num_clients,
            alpha,
            context,
        } => {
            let shared = corpus.filter(|s| s.context == context);
            partition_label_skew(&shared, num_clients, alpha, part_seed)?
        }
    };
    let server = server_corpus(&data_cfg, cfg.diffusion.overlap)?;
    Ok(DataBundle { clients, server })
}

/// Trains the server's noise predictor; returns it with its loss curve.
pub fn pretrain_diffusion(cfg: &ExperimentConfig, server: &Dataset) -> Result<(EpsNet, Vec<f64>)> {
    let s = stage_seed(cfg, seeds::DIFFUSION);
    let sched = cfg.diffusion.schedule.build()?;
    let mut net = EpsNet::new(
        server.dim,
        server.num_classes,
        &cfg.diffusion.net,
        &sched,
        &mut rng::stream(s, 0),
    )?;
    let curve = train_epsnet(
        &mut net,
        server,
        &sched,
        &cfg.diffusion.train,
        derive_seed(s, 1),
    )?;
    Ok((net, curve))
}

pub fn train_clients(cfg: &ExperimentConfig, data: &DataBundle) -> Result<Vec<ClientUpdate>> {
    let s = stage_seed(cfg, seeds::CLIENTS);
    data.clients
        .iter()
        .enumerate()
        .map(|(k, c)| {
            local_train(
                k,
                &c.train,
                &cfg.client_arch(k),
                &cfg.clients.train,
                derive_seed(s, k as u64),
            )
        })
        .collect()
}

pub fn generate(
    cfg: &ExperimentConfig,
    updates: &[ClientUpdate],
    net: &EpsNet,
    guidance: &GuidanceConfig,
) -> Result<SyntheticDataset> {
    let sched = cfg.diffusion.schedule.build()?;
    build_synthetic(
        updates,
        net,
        cfg.generation.per_class,
        &sched,
        guidance,
        stage_seed(cfg, seeds::GENERATION),
    )
}

pub fn strategy(cfg: &ExperimentConfig, kind: StrategyKind) -> AggregationStrategy {
    AggregationStrategy {
        kind,
        lambda_distill: cfg.aggregation.lambda_distill,
        temperature: cfg.aggregation.temperature,
        direction: cfg.aggregation.direction,
        train: cfg.aggregation.train.clone(),
    }
}

/// Trains one server model per configured strategy; all share one seed.
pub fn aggregate_all(
    cfg: &ExperimentConfig,
    synth: &SyntheticDataset,
    updates: &[ClientUpdate],
) -> Result<Vec<(StrategyKind, ClassifierModel)>> {
    let teachers: Vec<&ClassifierModel> = updates.iter().map(|u| &u.model).collect();
    let arch = cfg.server_arch();
    let seed = stage_seed(cfg, seeds::AGGREGATION);
    cfg.aggregation
        .strategies
        .iter()
        .map(|&k| {
            Ok((
                k,
                aggregate(synth, &arch, &teachers, &strategy(cfg, k), seed)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub per_client: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub method: String,
    pub report: LedgerReport,
    pub clients: Vec<ClientCost>,
}

impl LedgerEntry {
    pub fn from_ledger(l: &CostLedger) -> Self {
        Self {
            method: l.method.clone(),
            report: ledger_report(l),
            clients: l.clients.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub eps_loss_first: f64,
    pub eps_loss_last: f64,
    /// Client model accuracy on its own test set.
    pub local_accuracy: Vec<f64>,
    /// Fraction of client k's guided samples that client k labels as requested.
    pub self_agreement: Vec<f64>,
    pub mmd_guided: Vec<f64>,
    pub mmd_unguided: Option<Vec<f64>>,
    pub memorization_ratio: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub num_clients: usize,
    pub rows: Vec<MethodRow>,
    pub diagnostics: Diagnostics,
}

impl RunMetrics {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

pub fn method_name(kind: StrategyKind) -> String {
    format!("FedLMG_{}", kind.tag())
}

fn row(
    method: impl Into<String>,
    model: &ClassifierModel,
    tests: &[&Dataset],
) -> Result<MethodRow> {
    let e = evaluate_global(model, tests)?;
    Ok(MethodRow {
        method: method.into(),
        per_client: e.per_client,
        average: e.average,
    })
}

/// Everything a finished pipeline produced, kept in memory.
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub ledgers: Vec<LedgerEntry>,
    pub data: DataBundle,
    pub net: EpsNet,
    pub eps_curve: Vec<f64>,
    pub updates: Vec<ClientUpdate>,
    pub synth: SyntheticDataset,
    pub globals: Vec<(StrategyKind, ClassifierModel)>,
}

fn per_client_mmd(synth: &SyntheticDataset, tests: &[&Dataset]) -> Result<Vec<f64>> {
    tests
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let reference = t.features();
            let gamma = median_heuristic_gamma(&reference)?;
            mmd_rbf(
                &synth.features_where(|r| r.client == Some(k)),
                &reference,
                gamma,
            )
        })
        .collect()
}

/// Runs every stage and baseline in memory.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = make_data(cfg).map_err(|e| e.in_stage("make-data"))?;
    let (net, curve) =
        pretrain_diffusion(cfg, &data.server).map_err(|e| e.in_stage("pretrain-diffusion"))?;
    let updates = train_clients(cfg, &data).map_err(|e| e.in_stage("client-train"))?;
    let synth = generate(cfg, &updates, &net, &cfg.generation.guidance)
        .map_err(|e| e.in_stage("generate"))?;
    let globals = aggregate_all(cfg, &synth, &updates).map_err(|e| e.in_stage("aggregate"))?;
    let (metrics, ledgers) = evaluate_run(cfg, &data, &net, &updates, &synth, &globals, &curve)
        .map_err(|e| e.in_stage("evaluate"))?;
    Ok(RunOutput {
        metrics,
        ledgers,
        data,
        net,
        eps_curve: curve,
        updates,
        synth,
        globals,
    })
}

/// Scores the aggregated models, runs the requested baselines and gathers ledgers.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    data: &DataBundle,
    net: &EpsNet,
    updates: &[ClientUpdate],
    synth: &SyntheticDataset,
    globals: &[(StrategyKind, ClassifierModel)],
    eps_curve: &[f64],
) -> Result<(RunMetrics, Vec<LedgerEntry>)> {
    let tests = data.test_sets();
    let trains = data.train_sets();
    let arch = cfg.server_arch();
    let agg_seed = stage_seed(cfg, seeds::AGGREGATION);
    let mut rows = Vec::new();
    let mut ledgers = vec![LedgerEntry::from_ledger(&fedlmg_ledger(updates)?)];
    for (kind, model) in globals {
        rows.push(row(method_name(*kind), model, &tests)?);
    }
    let mut mmd_unguided = None;
    if cfg.baselines.unguided {
        let off = GuidanceConfig {
            guide_scale: 0.0,
            ..cfg.generation.guidance.clone()
        };
        let plain = generate(cfg, updates, net, &off)?;
        let m =
            crate::federation::aggregate_finetune(&plain, &arch, &cfg.aggregation.train, agg_seed)?;
        rows.push(row("Unguided", &m, &tests)?);
        mmd_unguided = Some(per_client_mmd(&plain, &tests)?);
    }
    if cfg.baselines.prompts_only {
        let sched = cfg.diffusion.schedule.build()?;
        let classes: Vec<usize> = (0..cfg.data.num_classes).collect();
        let n = synth.len().div_ceil(classes.len());
        let (prompts, ledger) = prompts_only_baseline(
            net,
            &classes,
            n,
            &sched,
            stage_seed(cfg, seeds::PROMPTS),
            updates.len(),
        )?;
        let m = crate::federation::aggregate_finetune(
            &prompts,
            &arch,
            &cfg.aggregation.train,
            agg_seed,
        )?;
        rows.push(row("Prompts Only", &m, &tests)?);
        ledgers.push(LedgerEntry::from_ledger(&ledger));
    }
    if cfg.baselines.fedavg_rounds > 0 {
        let archs: Vec<_> = (0..updates.len()).map(|k| cfg.client_arch(k)).collect();
        let fa = FedAvgConfig {
            rounds: cfg.baselines.fedavg_rounds,
            local_epochs: 1,
            weighting: cfg.baselines.fedavg_weighting,
            train: cfg.clients.train.clone(),
        };
        match fedavg_baseline(&trains, &archs, &fa, stage_seed(cfg, seeds::FEDAVG)) {
            Ok((m, ledger)) => {
                rows.push(row("FedAvg", &m, &tests)?);
                ledgers.push(LedgerEntry::from_ledger(&ledger));
            }
            Err(Error::Heterogeneous(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if cfg.baselines.ceiling {
        let (u, ledger) = ceiling_baseline(&trains, &arch, &cfg.aggregation.train, agg_seed)?;
        rows.push(row("Ceiling", &u.model, &tests)?);
        ledgers.push(LedgerEntry::from_ledger(&ledger));
    }
    let mut self_agree = Vec::new();
    let mut memo = Vec::new();
    let mut local = Vec::new();
    for (k, u) in updates.iter().enumerate() {
        let recs: Vec<_> = synth.for_client(k).into_iter().cloned().collect();
        self_agree.push(self_agreement(&u.model, &recs)?);
        memo.push(memorization_ratio(
            &synth.features_where(|r| r.client == Some(k)),
            trains[k],
        )?);
        local.push(accuracy(&u.model, tests[k])?);
    }
    let diagnostics = Diagnostics {
        eps_loss_first: eps_curve.first().copied().unwrap_or(f64::NAN),
        eps_loss_last: eps_curve.last().copied().unwrap_or(f64::NAN),
        local_accuracy: local,
        self_agreement: self_agree,
        mmd_guided: per_client_mmd(synth, &tests)?,
        mmd_unguided,
        memorization_ratio: memo,
    };
    let metrics = RunMetrics {
        seed: cfg.seed,
        num_clients: updates.len(),
        rows,
        diagnostics,
    };
    Ok((metrics, ledgers))
}

/// File layout of a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics_json(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn ledger_json(&self) -> PathBuf {
        self.root.join("ledger.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn client_checkpoint(&self, k: usize) -> PathBuf {
        self.checkpoints().join(format!("client_{k}.flmg"))
    }

    pub fn global_checkpoint(&self, kind: StrategyKind) -> PathBuf {
        self.checkpoints()
            .join(format!("global_{}.flmg", kind.tag()))
    }

    pub fn epsnet(&self) -> PathBuf {
        self.checkpoints().join("epsnet.flme")
    }

    /// Per-epoch noise-prediction loss of the pretraining run (JSON).
    pub fn eps_curve(&self) -> PathBuf {
        self.checkpoints().join("eps_loss.json")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn client_train(&self, k: usize) -> PathBuf {
        self.data_dir().join(format!("client_{k}_train.flmd"))
    }

    pub fn client_test(&self, k: usize) -> PathBuf {
        self.data_dir().join(format!("client_{k}_test.flmd"))
    }

    pub fn server_corpus(&self) -> PathBuf {
        self.data_dir().join("server.flmd")
    }

    pub fn synthetic(&self) -> PathBuf {
        self.root.join("synthetic.flmd")
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(self.checkpoints())?;
        fs::create_dir_all(self.data_dir())?;
        Ok(())
    }
}

pub fn write_config(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    fs::write(dir.config(), cfg.to_toml_string()?)?;
    Ok(())
}

pub fn write_data(data: &DataBundle, dir: &RunDir) -> Result<()> {
    save_dataset(&data.server, dir.server_corpus())?;
    for (k, c) in data.clients.iter().enumerate() {
        save_dataset(&c.train, dir.client_train(k))?;
        save_dataset(&c.test, dir.client_test(k))?;
    }
    Ok(())
}

pub fn write_clients(updates: &[ClientUpdate], dir: &RunDir) -> Result<()> {
    for u in updates {
        save_checkpoint(&u.model, &u.meta(), dir.client_checkpoint(u.client_id))?;
    }
    Ok(())
}

pub fn write_globals(
    cfg: &ExperimentConfig,
    globals: &[(StrategyKind, ClassifierModel)],
    dir: &RunDir,
) -> Result<()> {
    for (kind, m) in globals {
        let meta = CheckpointMeta {
            client_id: None,
            seed: stage_seed(cfg, seeds::AGGREGATION),
            epochs: cfg.aggregation.train.epochs as u32,
        };
        save_checkpoint(m, &meta, dir.global_checkpoint(*kind))?;
    }
    Ok(())
}

pub fn write_metrics(metrics: &RunMetrics, ledgers: &[LedgerEntry], dir: &RunDir) -> Result<()> {
    fs::write(dir.metrics_json(), serde_json::to_string_pretty(metrics)?)?;
    fs::write(dir.ledger_json(), serde_json::to_string_pretty(ledgers)?)?;
    let mut w = csv::Writer::from_path(dir.metrics_csv())?;
    let mut header = vec!["method".to_string()];
    header.extend((0..metrics.num_clients).map(|k| format!("client_{k}")));
    header.push("avg".into());
    w.write_record(&header)?;
    for r in &metrics.rows {
        let mut rec = vec![r.method.clone()];
        rec.extend(r.per_client.iter().map(|v| v.to_string()));
        rec.push(r.average.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the whole pipeline and writes the run directory under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = RunDir::new(out);
    dir.create()?;
    write_config(cfg, &dir)?;
    let run = run_pipeline(cfg)?;
    write_data(&run.data, &dir)?;
    save_epsnet(&run.net, dir.epsnet())?;
    fs::write(dir.eps_curve(), serde_json::to_string(&run.eps_curve)?)?;
    write_clients(&run.updates, &dir)?;
    save_synthetic(&run.synth, dir.synthetic())?;
    write_globals(cfg, &run.globals, &dir)?;
    write_metrics(&run.metrics, &run.ledgers, &dir)?;
    Ok(run)
}
