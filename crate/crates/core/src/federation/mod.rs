//! The one-shot protocol: clients train and upload once, the server
//! synthesizes per-client data with guided diffusion and trains the global
//! model on it. Baselines and cost accounting live alongside.

pub mod aggregate;
pub mod baselines;
pub mod ledger;
pub mod metrics;
pub mod server;
pub mod synthetic;
pub mod train;

pub use aggregate::{
    aggregate, aggregate_finetune, aggregate_multi_teacher, aggregate_specific_teacher,
    distill_with_targets, multi_teacher_targets, specific_teacher_targets, AggregationStrategy,
    StrategyKind,
};
pub use baselines::{
    ceiling_baseline, fedavg_baseline, prompts_only_baseline, FedAvgConfig, Weighting,
};
pub use ledger::{ledger_report, ClientCost, CostLedger, LedgerReport};
pub use metrics::{
    evaluate_global, mean, median_heuristic_gamma, memorization_ratio, mmd_rbf, EvalResult,
};
pub use server::{build_synthetic, fedlmg_ledger};
pub use synthetic::{SyntheticDataset, SyntheticRecord};
pub use train::{accuracy, local_train, ClientUpdate, TrainConfig};
