//! Dataset dumps: `"FLMD" | version u16 | kind u8 | dim u32 | classes u32 |
//! count u64`, then per record `f64 × dim | label u32 | tag u32`.
//! The tag is the context for corpora and the client id (u32::MAX = none)
//! for synthetic sets.

use std::fs;
use std::path::Path;

use super::wire::{to_u32, Reader, Writer};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::federation::{SyntheticDataset, SyntheticRecord};

pub const DATASET_MAGIC: &[u8; 4] = b"FLMD";
pub const DATASET_VERSION: u16 = 1;

const KIND_CORPUS: u8 = 0;
const KIND_SYNTHETIC: u8 = 1;

fn header(w: &mut Writer, kind: u8, dim: usize, classes: usize, count: usize) -> Result<()> {
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u8(kind);
    w.u32(to_u32(dim, "dim")?);
    w.u32(to_u32(classes, "classes")?);
    w.u64(count as u64);
    Ok(())
}

fn tag_u32(tag: Option<usize>) -> Result<u32> {
    match tag {
        None => Ok(u32::MAX),
        Some(t) if t < u32::MAX as usize => Ok(t as u32),
        Some(t) => Err(Error::invalid(format!("tag {t} too large"))),
    }
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    header(&mut w, KIND_CORPUS, data.dim, data.num_classes, data.len())?;
    for s in &data.samples {
        w.f64s(&s.x);
        w.u32(to_u32(s.label, "label")?);
        w.u32(tag_u32(Some(s.context))?);
    }
    Ok(w.buf)
}

pub fn encode_synthetic(data: &SyntheticDataset) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    header(
        &mut w,
        KIND_SYNTHETIC,
        data.dim,
        data.num_classes,
        data.len(),
    )?;
    for r in &data.records {
        w.f64s(&r.x);
        w.u32(to_u32(r.label, "label")?);
        w.u32(tag_u32(r.client)?);
    }
    Ok(w.buf)
}

type Records = (usize, usize, Vec<(Vec<f64>, usize, u32)>);

fn decode_records(bytes: &[u8], kind: u8) -> Result<Records> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let found = r.u8()?;
    if found != kind {
        return Err(Error::invalid(format!(
            "dataset kind {found}, expected {kind}"
        )));
    }
    let dim = r.usize32()?;
    let classes = r.usize32()?;
    let count = r.u64()? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let x = r.f64s(dim)?;
        let label = r.usize32()?;
        let tag = r.u32()?;
        out.push((x, label, tag));
    }
    r.finish()?;
    Ok((dim, classes, out))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let (dim, classes, recs) = decode_records(bytes, KIND_CORPUS)?;
    let mut d = Dataset::new(dim, classes);
    for (x, label, tag) in recs {
        d.push(Sample {
            x,
            label,
            context: tag as usize,
        })?;
    }
    Ok(d)
}

pub fn decode_synthetic(bytes: &[u8]) -> Result<SyntheticDataset> {
    let (dim, classes, recs) = decode_records(bytes, KIND_SYNTHETIC)?;
    let mut d = SyntheticDataset::new(dim, classes);
    for (x, label, tag) in recs {
        d.push(SyntheticRecord {
            x,
            label,
            client: (tag != u32::MAX).then_some(tag as usize),
        })?;
    }
    Ok(d)
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn save_synthetic(data: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_synthetic(data)?)?;
    Ok(())
}

pub fn load_synthetic(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    decode_synthetic(&fs::read(path)?)
}

/// Bytes one record of a `dim`-dimensional dataset occupies in a dump.
pub fn record_bytes(dim: usize) -> usize {
    8 * dim + 8
}
