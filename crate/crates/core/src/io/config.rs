//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ToyCorpusConfig;
use crate::diffusion::{EpsNetConfig, EpsTrainConfig, ScheduleConfig};
use crate::error::{Error, Result};
use crate::federation::{StrategyKind, TrainConfig, Weighting};
use crate::guidance::GuidanceConfig;
use crate::nn::{Architecture, KlDirection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Client `k` owns context `k`.
    FeatureSkew { num_clients: usize },
    /// Dirichlet class proportions over the samples of one context.
    LabelSkew {
        num_clients: usize,
        alpha: f64,
        #[serde(default)]
        context: usize,
    },
}

impl PartitionConfig {
    pub fn num_clients(&self) -> usize {
        match *self {
            PartitionConfig::FeatureSkew { num_clients }
            | PartitionConfig::LabelSkew { num_clients, .. } => num_clients,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    /// Hidden widths shared by every client unless `hidden_per_client` is set.
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_per_client: Option<Vec<Vec<usize>>>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub net: EpsNetConfig,
    pub train: EpsTrainConfig,
    /// Fraction of contexts the server corpus covers.
    #[serde(default = "one")]
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub guidance: GuidanceConfig,
    /// Samples per (client, class); absent means the client's own class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "one")]
    pub lambda_distill: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub direction: KlDirection,
    /// Hidden widths of the server model.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default)]
    pub prompts_only: bool,
    #[serde(default)]
    pub ceiling: bool,
    /// Fine-tune on conditional samples without client guidance.
    #[serde(default)]
    pub unguided: bool,
    /// FedAvg rounds; 0 disables FedAvg.
    #[serde(default)]
    pub fedavg_rounds: usize,
    #[serde(default)]
    pub fedavg_weighting: Weighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    /// The corpus seed is derived from `seed`; `data.seed` is ignored here.
    pub data: ToyCorpusConfig,
    pub partition: PartitionConfig,
    pub clients: ClientConfig,
    pub diffusion: DiffusionConfig,
    pub generation: GenerationConfig,
    pub aggregation: AggregationConfig,
    pub baselines: BaselineConfig,
}

fn one() -> f64 {
    1.0
}

impl Default for ExperimentConfig {
    /// The feature-skew benchmark: four clients on contexts 0–3 of an
    /// eight-context corpus.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: None,
            data: ToyCorpusConfig::default(),
            partition: PartitionConfig::FeatureSkew { num_clients: 4 },
            clients: ClientConfig {
                hidden: vec![64],
                hidden_per_client: None,
                train: TrainConfig {
                    epochs: 20,
                    lr: 0.05,
                    momentum: 0.9,
                    batch_size: 32,
                },
            },
            diffusion: DiffusionConfig {
                schedule: ScheduleConfig::default(),
                net: EpsNetConfig::default(),
                train: EpsTrainConfig::default(),
                overlap: 1.0,
            },
            generation: GenerationConfig {
                guidance: GuidanceConfig::default(),
                per_class: Some(100),
            },
            aggregation: AggregationConfig {
                strategies: vec![
                    StrategyKind::FineTune,
                    StrategyKind::MultiTeacher,
                    StrategyKind::SpecificTeacher,
                ],
                lambda_distill: 1.0,
                temperature: 1.0,
                direction: KlDirection::default(),
                hidden: vec![64],
                train: TrainConfig {
                    epochs: 30,
                    lr: 0.05,
                    momentum: 0.9,
                    batch_size: 32,
                },
            },
            baselines: BaselineConfig {
                prompts_only: true,
                ceiling: true,
                unguided: true,
                fedavg_rounds: 20,
                fedavg_weighting: Weighting::BySize,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_clients(&self) -> usize {
        self.partition.num_clients()
    }

    pub fn client_arch(&self, k: usize) -> Architecture {
        let hidden = match &self.clients.hidden_per_client {
            Some(h) => &h[k],
            None => &self.clients.hidden,
        };
        Architecture::mlp(self.data.dim(), hidden, self.data.num_classes)
    }

    pub fn server_arch(&self) -> Architecture {
        Architecture::mlp(
            self.data.dim(),
            &self.aggregation.hidden,
            self.data.num_classes,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.data
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let k = self.num_clients();
        if k == 0 {
            return bad("at least one client is required".into());
        }
        match self.partition {
            PartitionConfig::FeatureSkew { num_clients }
                if num_clients > self.data.num_contexts =>
            {
                return bad(format!(
                    "{num_clients} feature-skew clients but only {} contexts",
                    self.data.num_contexts
                ));
            }
            PartitionConfig::LabelSkew { alpha, context, .. } => {
                if !(alpha > 0.0) {
                    return bad("label-skew alpha must be positive".into());
                }
                if context >= self.data.num_contexts {
                    return bad(format!("label-skew context {context} does not exist"));
                }
            }
            _ => {}
        }
        if let Some(h) = &self.clients.hidden_per_client {
            if h.len() != k {
                return bad(format!(
                    "hidden_per_client lists {} clients, partition has {k}",
                    h.len()
                ));
            }
        }
        if !(self.diffusion.overlap > 0.0 && self.diffusion.overlap <= 1.0) {
            return bad("overlap must lie in (0, 1]".into());
        }
        let checks = [
            self.clients.train.validate(),
            self.aggregation.train.validate(),
            self.generation.guidance.validate(),
        ];
        for c in checks {
            c.map_err(|e| Error::Config(e.to_string()))?;
        }
        self.diffusion
            .schedule
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.generation.per_class == Some(0) {
            return bad("per_class must be at least 1".into());
        }
        if self.aggregation.strategies.is_empty() {
            return bad("list at least one aggregation strategy".into());
        }
        if !(self.aggregation.lambda_distill >= 0.0) || !(self.aggregation.temperature > 0.0) {
            return bad("lambda_distill ≥ 0 and temperature > 0 are required".into());
        }
        Ok(())
    }
}
