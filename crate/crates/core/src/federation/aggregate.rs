//! Server-side aggregation on the synthetic dataset: plain fine-tuning, or
//! fine-tuning plus distillation from the mean of all client models or from
//! each record's own client model.

use serde::{Deserialize, Serialize};

use super::synthetic::SyntheticDataset;
use super::train::{init_model, shuffle_stream, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::nn::{distillation_kl, softmax, Architecture, ClassifierModel, KlDirection, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "FT")]
    FineTune,
    #[serde(rename = "MD")]
    MultiTeacher,
    #[serde(rename = "SD")]
    SpecificTeacher,
}

impl StrategyKind {
    pub fn tag(self) -> &'static str {
        match self {
            StrategyKind::FineTune => "FT",
            StrategyKind::MultiTeacher => "MD",
            StrategyKind::SpecificTeacher => "SD",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationStrategy {
    pub kind: StrategyKind,
    #[serde(default = "one")]
    pub lambda_distill: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub direction: KlDirection,
    pub train: TrainConfig,
}

fn one() -> f64 {
    1.0
}

impl AggregationStrategy {
    pub fn new(kind: StrategyKind, train: TrainConfig) -> Self {
        Self {
            kind,
            lambda_distill: 1.0,
            temperature: 1.0,
            direction: KlDirection::default(),
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_distill >= 0.0 && self.lambda_distill.is_finite()) {
            return Err(Error::invalid(
                "lambda_distill must be finite and non-negative",
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.train.validate()
    }
}

fn check_synth(synth: &SyntheticDataset, arch: &Architecture) -> Result<()> {
    if synth.is_empty() {
        return Err(Error::Empty("synthetic dataset"));
    }
    if arch.input_dim != synth.dim || arch.num_classes != synth.num_classes {
        return Err(Error::shape(
            "server architecture does not fit the synthetic data",
        ));
    }
    Ok(())
}

/// Cross-entropy training of a fresh server model on `(x̂, y)` pairs.
pub fn aggregate_finetune(
    synth: &SyntheticDataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ClassifierModel> {
    check_synth(synth, arch)?;
    let data = synth.to_dataset();
    let mut tr = Trainer::new(init_model(arch, seed)?, cfg, shuffle_stream(seed, 0))?;
    for _ in 0..cfg.epochs {
        tr.epoch(&data, None)?;
    }
    Ok(tr.model)
}

fn check_teacher(t: &ClassifierModel, synth: &SyntheticDataset) -> Result<()> {
    if t.input_dim() != synth.dim || t.num_classes() != synth.num_classes {
        return Err(Error::shape(format!(
            "teacher maps {}→{}, synthetic data is {}→{}",
            t.input_dim(),
            t.num_classes(),
            synth.dim,
            synth.num_classes
        )));
    }
    Ok(())
}

fn tempered_probs(model: &ClassifierModel, x: &Tensor, tau: f64) -> Result<Vec<Vec<f64>>> {
    let logits = model.logits(x)?;
    Ok((0..logits.rows())
        .map(|r| softmax(logits.row(r), tau))
        .collect())
}

/// Teacher distribution per record: the mean of every teacher's tempered
/// softmax.
pub fn multi_teacher_targets(
    synth: &SyntheticDataset,
    teachers: &[&ClassifierModel],
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    if teachers.is_empty() {
        return Err(Error::Empty("teacher list"));
    }
    let x = synth.features_where(|_| true);
    let mut sum = vec![vec![0.0; synth.num_classes]; synth.len()];
    for t in teachers {
        check_teacher(t, synth)?;
        for (acc, p) in sum.iter_mut().zip(tempered_probs(t, &x, tau)?) {
            for (a, v) in acc.iter_mut().zip(p) {
                *a += v;
            }
        }
    }
    let k = teachers.len() as f64;
    for row in &mut sum {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    Ok(sum)
}

/// Teacher distribution per record: the tempered softmax of the record's own
/// client model (`teachers[k]` for client id `k`).
pub fn specific_teacher_targets(
    synth: &SyntheticDataset,
    teachers: &[&ClassifierModel],
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); synth.len()];
    for r in &synth.records {
        let k = r.client.ok_or(Error::MissingTeacher(usize::MAX))?;
        if k >= teachers.len() {
            return Err(Error::MissingTeacher(k));
        }
    }
    for (k, t) in teachers.iter().enumerate() {
        let idx: Vec<usize> = (0..synth.len())
            .filter(|&i| synth.records[i].client == Some(k))
            .collect();
        if idx.is_empty() {
            continue;
        }
        check_teacher(t, synth)?;
        let mut data = Vec::with_capacity(idx.len() * synth.dim);
        for &i in &idx {
            data.extend_from_slice(&synth.records[i].x);
        }
        let x = Tensor::from_parts(vec![idx.len(), synth.dim], data);
        for (i, p) in idx.into_iter().zip(tempered_probs(t, &x, tau)?) {
            out[i] = p;
        }
    }
    Ok(out)
}

/// Cross-entropy plus `λ·KL` against fixed per-record teacher distributions.
/// With `λ = 0` the KL term is skipped entirely, so the trajectory is the
/// fine-tune trajectory bit for bit.
pub fn distill_with_targets(
    synth: &SyntheticDataset,
    arch: &Architecture,
    targets: &[Vec<f64>],
    strategy: &AggregationStrategy,
    seed: u64,
) -> Result<ClassifierModel> {
    strategy.validate()?;
    check_synth(synth, arch)?;
    if targets.len() != synth.len() {
        return Err(Error::shape(
            "one teacher distribution per record is required",
        ));
    }
    let data = synth.to_dataset();
    let cfg = &strategy.train;
    let mut tr = Trainer::new(init_model(arch, seed)?, cfg, shuffle_stream(seed, 0))?;
    let lambda = strategy.lambda_distill;
    let extra = |idx: &[usize], logits: &Tensor| -> Result<Tensor> {
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| targets[i].clone()).collect();
        let (_, g) = distillation_kl(logits, &p, strategy.temperature, strategy.direction)?;
        Ok(g.scaled(lambda))
    };
    for _ in 0..cfg.epochs {
        if lambda == 0.0 {
            tr.epoch(&data, None)?;
        } else {
            tr.epoch(&data, Some(&extra))?;
        }
    }
    Ok(tr.model)
}

pub fn aggregate_multi_teacher(
    synth: &SyntheticDataset,
    arch: &Architecture,
    teachers: &[&ClassifierModel],
    strategy: &AggregationStrategy,
    seed: u64,
) -> Result<ClassifierModel> {
    let targets = multi_teacher_targets(synth, teachers, strategy.temperature)?;
    distill_with_targets(synth, arch, &targets, strategy, seed)
}

pub fn aggregate_specific_teacher(
    synth: &SyntheticDataset,
    arch: &Architecture,
    teachers: &[&ClassifierModel],
    strategy: &AggregationStrategy,
    seed: u64,
) -> Result<ClassifierModel> {
    let targets = specific_teacher_targets(synth, teachers, strategy.temperature)?;
    distill_with_targets(synth, arch, &targets, strategy, seed)
}

/// Dispatches on `strategy.kind`.
pub fn aggregate(
    synth: &SyntheticDataset,
    arch: &Architecture,
    teachers: &[&ClassifierModel],
    strategy: &AggregationStrategy,
    seed: u64,
) -> Result<ClassifierModel> {
    match strategy.kind {
        StrategyKind::FineTune => {
            strategy.validate()?;
            aggregate_finetune(synth, arch, &strategy.train, seed)
        }
        StrategyKind::MultiTeacher => {
            aggregate_multi_teacher(synth, arch, teachers, strategy, seed)
        }
        StrategyKind::SpecificTeacher => {
            aggregate_specific_teacher(synth, arch, teachers, strategy, seed)
        }
    }
}
