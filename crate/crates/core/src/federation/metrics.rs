//! Evaluation of the global model and distances between sample sets.

use serde::{Deserialize, Serialize};

use super::train::accuracy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{ClassifierModel, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_client: Vec<f64>,
    pub average: f64,
}

/// Unweighted mean.
pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("value list"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Accuracy on every client's test set and their unweighted mean.
pub fn evaluate_global(model: &ClassifierModel, tests: &[&Dataset]) -> Result<EvalResult> {
    if tests.is_empty() {
        return Err(Error::Empty("test set list"));
    }
    let per_client = tests
        .iter()
        .map(|t| accuracy(model, t))
        .collect::<Result<Vec<_>>>()?;
    let average = mean(&per_client)?;
    Ok(EvalResult {
        per_client,
        average,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rows_of(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|r| t.row(r)).collect()
}

/// `1 / (2·m²)` with `m` the median pairwise distance inside `reference`.
pub fn median_heuristic_gamma(reference: &Tensor) -> Result<f64> {
    let rows = rows_of(reference);
    if rows.len() < 2 {
        return Err(Error::Empty("reference set for bandwidth"));
    }
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let med = d[d.len() / 2];
    if med <= 0.0 {
        return Err(Error::invalid("reference set has zero spread"));
    }
    Ok(1.0 / (2.0 * med))
}

fn mean_kernel(a: &[&[f64]], b: &[&[f64]], gamma: f64) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += (-gamma * sq_dist(x, y)).exp();
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased squared maximum mean discrepancy with kernel `exp(−γ‖x−y‖²)`.
pub fn mmd_rbf(x: &Tensor, y: &Tensor, gamma: f64) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Empty("sample set"));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("sample sets differ in dimension"));
    }
    let (a, b) = (rows_of(x), rows_of(y));
    let v =
        mean_kernel(&a, &a, gamma) + mean_kernel(&b, &b, gamma) - 2.0 * mean_kernel(&a, &b, gamma);
    Ok(v.max(0.0))
}

/// Generated-vs-train nearest-neighbor distance divided by the mean
/// same-class nearest-neighbor distance inside the train set. Well above 0
/// means the generations are not copies of training images.
pub fn memorization_ratio(generated: &Tensor, train: &Dataset) -> Result<f64> {
    if generated.rows() == 0 || train.len() < 2 {
        return Err(Error::Empty("sample set"));
    }
    let nn = |x: &[f64], skip: Option<usize>, same: Option<usize>| -> f64 {
        train
            .samples
            .iter()
            .enumerate()
            .filter(|(i, s)| Some(*i) != skip && same.is_none_or(|c| s.label == c))
            .map(|(_, s)| sq_dist(x, &s.x))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let gen_mean = rows_of(generated)
        .iter()
        .map(|x| nn(x, None, None))
        .sum::<f64>()
        / generated.rows() as f64;
    let mut intra = 0.0;
    let mut counted = 0;
    for (i, s) in train.samples.iter().enumerate() {
        let d = nn(&s.x, Some(i), Some(s.label));
        if d.is_finite() {
            intra += d;
            counted += 1;
        }
    }
    if counted == 0 || intra == 0.0 {
        return Err(Error::invalid("train set has no same-class neighbors"));
    }
    Ok(gen_mean / (intra / counted as f64))
}
