//! SGD training loop shared by clients, the server aggregator and the baselines.
//!
//! Seeding convention: a run with seed `s` initializes its model from stream
//! `(s, 0)` and shuffles participant `k` with stream `(derive(s, 1), k)`.
//! Local training is participant 0, which makes one-client FedAvg and
//! pooled training line up with it exactly.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::checkpoint::{checkpoint_size, CheckpointMeta};
use crate::nn::{cross_entropy, Architecture, ClassifierModel, Mode, Sgd, Tensor};
use crate::rng::{self, derive_seed, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("training batch size must be at least 2"));
        }
        Ok(())
    }
}

pub(crate) fn init_model(arch: &Architecture, seed: u64) -> Result<ClassifierModel> {
    ClassifierModel::new(arch, &mut rng::stream(seed, 0))
}

pub(crate) fn shuffle_stream(seed: u64, participant: usize) -> StreamRng {
    rng::stream(derive_seed(seed, 1), participant as u64)
}

/// Extra logit gradient added to the cross-entropy gradient of a batch,
/// given the dataset indices of its rows and the student logits.
pub(crate) type ExtraLoss<'a> = dyn Fn(&[usize], &Tensor) -> Result<Tensor> + 'a;

/// A model, its optimizer state and its shuffle stream.
pub(crate) struct Trainer {
    pub model: ClassifierModel,
    opt: Sgd,
    rng: StreamRng,
    batch_size: usize,
    pub samples_seen: u64,
}

impl Trainer {
    pub fn new(model: ClassifierModel, cfg: &TrainConfig, rng: StreamRng) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(model.param_count(), cfg.lr, cfg.momentum);
        Ok(Self {
            model,
            opt,
            rng,
            batch_size: cfg.batch_size,
            samples_seen: 0,
        })
    }

    /// One pass over `data` in a fresh random order. A trailing batch of a
    /// single sample is skipped when the model has batch-norm layers.
    pub fn epoch(&mut self, data: &Dataset, extra: Option<&ExtraLoss<'_>>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let order = rng::permutation(&mut self.rng, data.len());
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(self.batch_size) {
            if chunk.len() < 2 && self.model.num_bn_layers() > 0 {
                continue;
            }
            let x = data.batch(chunk);
            let labels = data.labels(chunk);
            let (logits, cache) = self.model.forward(&x, Mode::Train)?;
            let (loss, mut d) = cross_entropy(&logits, &labels)?;
            if let Some(f) = extra {
                let e = f(chunk, &logits)?;
                for (a, b) in d.data_mut().iter_mut().zip(e.data()) {
                    *a += b;
                }
            }
            let grads = self.model.backward(&cache, &d)?;
            self.opt.step(self.model.params_mut(), &grads.params)?;
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(Error::BatchTooSmall(data.len()));
        }
        self.samples_seen += seen as u64;
        Ok(total / seen as f64)
    }

    /// Training flop estimate so far: forward MACs per sample, times three
    /// (backward costed at twice the forward), times samples processed.
    pub fn flops(&self) -> u64 {
        3 * self.model.forward_macs() * self.samples_seen
    }
}

/// What a client uploads once: its trained model (weights and BN statistics)
/// and a little bookkeeping.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub model: ClassifierModel,
    pub arch: Architecture,
    pub train_size: usize,
    pub class_counts: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    /// Serialized checkpoint length in bytes.
    pub upload_bytes: usize,
    pub train_flops: u64,
}

impl ClientUpdate {
    pub fn label_set(&self) -> Vec<usize> {
        (0..self.class_counts.len())
            .filter(|&y| self.class_counts[y] > 0)
            .collect()
    }

    pub fn upload_params(&self) -> usize {
        self.model.param_count() + self.model.bn_stat_count()
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            client_id: Some(self.client_id as u32),
            seed: self.seed,
            epochs: self.epochs as u32,
        }
    }
}

/// Samples one training epoch processes (a trailing single-sample batch is
/// skipped for batch-norm models).
pub fn samples_per_epoch(model: &ClassifierModel, n: usize, batch_size: usize) -> usize {
    if model.num_bn_layers() > 0 && n % batch_size == 1 {
        n - 1
    } else {
        n
    }
}

impl ClientUpdate {
    /// Rebuilds an update from a stored checkpoint and the client's train set.
    pub fn from_checkpoint(
        model: ClassifierModel,
        meta: &CheckpointMeta,
        arch: Architecture,
        data: &Dataset,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if model.layers() != arch.layers().as_slice() {
            return Err(Error::shape(
                "checkpoint architecture differs from the configured one",
            ));
        }
        let flops = 3
            * model.forward_macs()
            * (samples_per_epoch(&model, data.len(), cfg.batch_size) * meta.epochs as usize) as u64;
        Ok(Self {
            client_id: meta
                .client_id
                .ok_or_else(|| Error::invalid("checkpoint carries no client id"))?
                as usize,
            upload_bytes: checkpoint_size(&model),
            model,
            arch,
            train_size: data.len(),
            class_counts: data.class_counts(),
            seed: meta.seed,
            epochs: meta.epochs as usize,
            train_flops: flops,
        })
    }
}

/// Trains a client classifier with cross-entropy only.
pub fn local_train(
    client_id: usize,
    data: &Dataset,
    arch: &Architecture,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::Empty("client dataset"));
    }
    if arch.input_dim != data.dim || arch.num_classes != data.num_classes {
        return Err(Error::shape("architecture does not fit the client data"));
    }
    let mut tr = Trainer::new(init_model(arch, seed)?, cfg, shuffle_stream(seed, 0))?;
    for _ in 0..cfg.epochs {
        tr.epoch(data, None)?;
    }
    let flops = tr.flops();
    let model = tr.model;
    Ok(ClientUpdate {
        client_id,
        upload_bytes: checkpoint_size(&model),
        model,
        arch: arch.clone(),
        train_size: data.len(),
        class_counts: data.class_counts(),
        seed,
        epochs: cfg.epochs,
        train_flops: flops,
    })
}

/// Fraction of `data` that `model` classifies correctly (Eval mode).
pub fn accuracy(model: &ClassifierModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let pred = model.predict(&data.features())?;
    let hits = pred
        .iter()
        .zip(&data.samples)
        .filter(|(p, s)| **p == s.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
