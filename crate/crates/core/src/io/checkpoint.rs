//! Binary checkpoint of a client classifier: the artifact a client uploads.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FLMG" | version u16 | input_dim u32 | num_classes u32 | layer_count u32
//! per layer: kind u8, then Linear: in u32, out u32
//!                          BatchNorm: dim u32, momentum f64, eps f64
//!                          ReLU: nothing
//! param_count u64 | params f64 × param_count (layer order; linear weights [in × out], then bias)
//! per batch-norm layer: running mean f64 × dim, running var f64 × dim
//! client_id u32 (u32::MAX = none) | seed u64 | epochs u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::wire::{to_u32, Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{BnStats, ClassifierModel, LayerSpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLMG";
pub const CHECKPOINT_VERSION: u16 = 1;
pub const METADATA_BYTES: usize = 16;

const KIND_LINEAR: u8 = 0;
const KIND_BN: u8 = 1;
const KIND_RELU: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub client_id: Option<u32>,
    pub seed: u64,
    pub epochs: u32,
}

/// Bytes before the parameter blob: magic, version, dims, layer table and the
/// parameter count.
pub fn header_bytes(layers: &[LayerSpec]) -> usize {
    let table: usize = layers
        .iter()
        .map(|l| match l {
            LayerSpec::Linear { .. } => 1 + 8,
            LayerSpec::BatchNorm { .. } => 1 + 4 + 16,
            LayerSpec::Relu => 1,
        })
        .sum();
    4 + 2 + 12 + table + 8
}

/// Exact serialized size of `model`.
pub fn checkpoint_size(model: &ClassifierModel) -> usize {
    header_bytes(model.layers())
        + 8 * (model.param_count() + model.bn_stat_count())
        + METADATA_BYTES
}

pub fn encode_checkpoint(model: &ClassifierModel, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u32(to_u32(model.input_dim(), "input dim")?);
    w.u32(to_u32(model.num_classes(), "class count")?);
    w.u32(to_u32(model.layers().len(), "layer count")?);
    for l in model.layers() {
        match *l {
            LayerSpec::Linear { in_dim, out_dim } => {
                w.u8(KIND_LINEAR);
                w.u32(to_u32(in_dim, "linear input")?);
                w.u32(to_u32(out_dim, "linear output")?);
            }
            LayerSpec::BatchNorm { dim, momentum, eps } => {
                w.u8(KIND_BN);
                w.u32(to_u32(dim, "batch-norm dim")?);
                w.f64(momentum);
                w.f64(eps);
            }
            LayerSpec::Relu => w.u8(KIND_RELU),
        }
    }
    w.u64(model.param_count() as u64);
    w.f64s(model.params());
    for s in model.bn_stats() {
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    w.u32(meta.client_id.unwrap_or(u32::MAX));
    w.u64(meta.seed);
    w.u32(meta.epochs);
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ClassifierModel, CheckpointMeta)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let input_dim = r.usize32()?;
    let num_classes = r.usize32()?;
    let count = r.usize32()?;
    let mut layers = Vec::new();
    for _ in 0..count {
        let layer = match r.u8()? {
            KIND_LINEAR => LayerSpec::Linear {
                in_dim: r.usize32()?,
                out_dim: r.usize32()?,
            },
            KIND_BN => LayerSpec::BatchNorm {
                dim: r.usize32()?,
                momentum: r.f64()?,
                eps: r.f64()?,
            },
            KIND_RELU => LayerSpec::Relu,
            k => return Err(Error::invalid(format!("unknown layer kind {k}"))),
        };
        layers.push(layer);
    }
    let declared = r.u64()? as usize;
    let expected: usize = layers.iter().map(|l| l.param_count()).sum();
    if declared != expected {
        return Err(Error::LengthMismatch(format!(
            "parameter count {declared} disagrees with the architecture ({expected})"
        )));
    }
    let params = r.f64s(declared)?;
    let mut bn_stats = Vec::new();
    for l in &layers {
        if let LayerSpec::BatchNorm { dim, .. } = *l {
            let mean = r.f64s(dim)?;
            let var = r.f64s(dim)?;
            bn_stats.push(BnStats { mean, var });
        }
    }
    let client = r.u32()?;
    let meta = CheckpointMeta {
        client_id: (client != u32::MAX).then_some(client),
        seed: r.u64()?,
        epochs: r.u32()?,
    };
    r.finish()?;
    let model = ClassifierModel::from_parts(input_dim, layers, params, bn_stats)?;
    if model.num_classes() != num_classes {
        return Err(Error::LengthMismatch(format!(
            "header says {num_classes} classes, architecture ends in {}",
            model.num_classes()
        )));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(
    model: &ClassifierModel,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let bytes = encode_checkpoint(model, meta)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ClassifierModel, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}
