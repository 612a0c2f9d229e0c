use std::collections::BTreeMap;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One generated sample with its automatic label and originating client
/// (`None` for samples no client model was involved in).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub x: Vec<f64>,
    pub label: usize,
    pub client: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dim: usize,
    pub num_classes: usize,
    pub records: Vec<SyntheticRecord>,
}

impl SyntheticDataset {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: SyntheticRecord) -> Result<()> {
        if record.x.len() != self.dim {
            return Err(Error::shape(format!(
                "record of length {} in a {}-dim dataset",
                record.x.len(),
                self.dim
            )));
        }
        if record.label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: record.label,
                classes: self.num_classes,
            });
        }
        if record.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("synthetic record"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = SyntheticRecord>) -> Result<()> {
        for r in records {
            self.push(r)?;
        }
        Ok(())
    }

    /// Record tally per `(client, class)`.
    pub fn counts(&self) -> BTreeMap<(Option<usize>, usize), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.client, r.label)).or_insert(0) += 1;
        }
        out
    }

    pub fn for_client(&self, k: usize) -> Vec<&SyntheticRecord> {
        self.records
            .iter()
            .filter(|r| r.client == Some(k))
            .collect()
    }

    /// Features of the records selected by `keep`, as a `[n, dim]` matrix.
    pub fn features_where(&self, mut keep: impl FnMut(&SyntheticRecord) -> bool) -> Tensor {
        let mut data = Vec::new();
        let mut n = 0;
        for r in self.records.iter().filter(|r| keep(r)) {
            data.extend_from_slice(&r.x);
            n += 1;
        }
        Tensor::from_parts(vec![n, self.dim], data)
    }

    /// Labeled training view; the client id (or `usize::MAX`) becomes the context tag.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            samples: self
                .records
                .iter()
                .map(|r| Sample {
                    x: r.x.clone(),
                    label: r.label,
                    context: r.client.unwrap_or(usize::MAX),
                })
                .collect(),
        }
    }

    /// Real data presented as a synthetic set (client id taken from `client`).
    pub fn from_dataset(data: &Dataset, client: Option<usize>) -> Self {
        Self {
            dim: data.dim,
            num_classes: data.num_classes,
            records: data
                .samples
                .iter()
                .map(|s| SyntheticRecord {
                    x: s.x.clone(),
                    label: s.label,
                    client,
                })
                .collect(),
        }
    }
}
