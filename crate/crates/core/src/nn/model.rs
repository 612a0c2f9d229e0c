//! Layered classifier with batch normalization and reverse-mode gradients
//! for both parameters and inputs.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear { in_dim: usize, out_dim: usize },
    BatchNorm { dim: usize, momentum: f64, eps: f64 },
    Relu,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Linear { in_dim, out_dim } => in_dim * out_dim + out_dim,
            LayerSpec::BatchNorm { dim, .. } => 2 * dim,
            LayerSpec::Relu => 0,
        }
    }

    /// Multiply-adds per sample in the forward pass.
    pub fn forward_macs(&self, width: usize) -> u64 {
        match *self {
            LayerSpec::Linear { in_dim, out_dim } => (in_dim * out_dim + out_dim) as u64,
            LayerSpec::BatchNorm { dim, .. } => 2 * dim as u64,
            LayerSpec::Relu => width as u64,
        }
    }
}

/// Linear→BatchNorm→ReLU stacks followed by a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_eps: f64,
}

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

fn default_eps() -> f64 {
    DEFAULT_BN_EPS
}

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            num_classes,
            bn_momentum: DEFAULT_BN_MOMENTUM,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut width = self.input_dim;
        for &h in &self.hidden {
            layers.push(LayerSpec::Linear {
                in_dim: width,
                out_dim: h,
            });
            layers.push(LayerSpec::BatchNorm {
                dim: h,
                momentum: self.bn_momentum,
                eps: self.bn_eps,
            });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Linear {
            in_dim: width,
            out_dim: self.num_classes,
        });
        layers
    }
}

/// Running mean and (biased) running variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum LayerCache {
    Linear {
        input: Vec<f64>,
    },
    BatchNorm {
        input: Vec<f64>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Vec<f64>,
    },
}

/// Activation record of one forward pass, consumed by [`ClassifierModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_id: u64,
    generation: u64,
    batch: usize,
    entries: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Inputs of every batch-norm layer, in layer order, each `[batch, dim]`.
    pub fn bn_inputs(&self) -> Vec<&[f64]> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                LayerCache::BatchNorm { input, .. } => Some(input.as_slice()),
                _ => None,
            })
            .collect()
    }

    /// Sign pattern of every ReLU input; used to detect kinks in numeric checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for e in &self.entries {
            if let LayerCache::Relu { input } = e {
                out.extend(input.iter().map(|&v| v > 0.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Tensor,
}

#[derive(Debug)]
pub struct ClassifierModel {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
    bn_stats: Vec<BnStats>,
    input_dim: usize,
    num_classes: usize,
    id: u64,
    generation: u64,
}

impl Clone for ClassifierModel {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            offsets: self.offsets.clone(),
            params: self.params.clone(),
            bn_stats: self.bn_stats.clone(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl PartialEq for ClassifierModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.input_dim == other.input_dim
            && self.params == other.params
            && self.bn_stats == other.bn_stats
    }
}

fn validate_layers(input_dim: usize, layers: &[LayerSpec]) -> Result<usize> {
    if input_dim == 0 {
        return Err(Error::invalid("input dimension must be positive"));
    }
    let mut width = input_dim;
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Linear { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::invalid(format!("layer {i}: zero dimension")));
                }
                if in_dim != width {
                    return Err(Error::shape(format!(
                        "layer {i}: linear expects {in_dim} inputs, previous width is {width}"
                    )));
                }
                width = out_dim;
            }
            LayerSpec::BatchNorm { dim, momentum, eps } => {
                if dim == 0 {
                    return Err(Error::invalid(format!("layer {i}: zero dimension")));
                }
                if dim != width {
                    return Err(Error::shape(format!(
                        "layer {i}: batch norm over {dim} features, previous width is {width}"
                    )));
                }
                if !(momentum > 0.0 && momentum <= 1.0) {
                    return Err(Error::invalid(format!(
                        "layer {i}: momentum {momentum} not in (0, 1]"
                    )));
                }
                if !(eps > 0.0) {
                    return Err(Error::invalid(format!("layer {i}: eps must be positive")));
                }
            }
            LayerSpec::Relu => {}
        }
    }
    Ok(width)
}

impl ClassifierModel {
    /// Builds a model with freshly initialized parameters: linear weights
    /// uniform in ±sqrt(6/(fan_in+fan_out)), zero biases, unit BN scale,
    /// zero BN shift, running statistics (0, 1).
    pub fn from_layers<R: Rng + ?Sized>(
        input_dim: usize,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let num_classes = validate_layers(input_dim, &layers)?;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
        }
        let mut params = vec![0.0; total];
        let mut bn_stats = Vec::new();
        for (l, &off) in layers.iter().zip(&offsets) {
            match *l {
                LayerSpec::Linear { in_dim, out_dim } => {
                    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
                    for w in &mut params[off..off + in_dim * out_dim] {
                        *w = rng.random_range(-bound..bound);
                    }
                }
                LayerSpec::BatchNorm { dim, .. } => {
                    params[off..off + dim].fill(1.0);
                    bn_stats.push(BnStats {
                        mean: vec![0.0; dim],
                        var: vec![1.0; dim],
                    });
                }
                LayerSpec::Relu => {}
            }
        }
        Ok(Self {
            layers,
            offsets,
            params,
            bn_stats,
            input_dim,
            num_classes,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.num_classes == 0 {
            return Err(Error::invalid("a classifier needs at least one class"));
        }
        Self::from_layers(arch.input_dim, arch.layers(), rng)
    }

    /// Reassembles a model from stored parts, validating every length.
    pub fn from_parts(
        input_dim: usize,
        layers: Vec<LayerSpec>,
        params: Vec<f64>,
        bn_stats: Vec<BnStats>,
    ) -> Result<Self> {
        let num_classes = validate_layers(input_dim, &layers)?;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        let mut bn_dims = Vec::new();
        for l in &layers {
            offsets.push(total);
            total += l.param_count();
            if let LayerSpec::BatchNorm { dim, .. } = *l {
                bn_dims.push(dim);
            }
        }
        if params.len() != total {
            return Err(Error::LengthMismatch(format!(
                "architecture needs {total} parameters, got {}",
                params.len()
            )));
        }
        if bn_stats.len() != bn_dims.len() {
            return Err(Error::LengthMismatch(format!(
                "architecture has {} batch-norm layers, got {} statistic sets",
                bn_dims.len(),
                bn_stats.len()
            )));
        }
        for (s, &d) in bn_stats.iter().zip(&bn_dims) {
            if s.mean.len() != d || s.var.len() != d {
                return Err(Error::LengthMismatch(format!(
                    "batch-norm statistics of width {d}"
                )));
            }
            if s.var.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::invalid(
                    "running variances must be strictly positive",
                ));
            }
        }
        if params
            .iter()
            .chain(bn_stats.iter().flat_map(|s| s.mean.iter().chain(&s.var)))
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self {
            layers,
            offsets,
            params,
            bn_stats,
            input_dim,
            num_classes,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_bn_layers(&self) -> usize {
        self.bn_stats.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn bn_stat_count(&self) -> usize {
        self.bn_stats.iter().map(|s| 2 * s.mean.len()).sum()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BnStats] {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut [BnStats] {
        &mut self.bn_stats
    }

    /// Ordered running statistics of every batch-norm layer.
    pub fn extract_bn_stats(&self) -> Vec<BnStats> {
        self.bn_stats.clone()
    }

    /// Forward MACs per sample over the whole network.
    pub fn forward_macs(&self) -> u64 {
        let mut width = self.input_dim;
        let mut total = 0;
        for l in &self.layers {
            total += l.forward_macs(width);
            if let LayerSpec::Linear { out_dim, .. } = *l {
                width = out_dim;
            }
        }
        total
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (rows, cols) = x.dims2()?;
        if cols != self.input_dim {
            return Err(Error::shape(format!(
                "model expects {} input features, got {cols}",
                self.input_dim
            )));
        }
        if rows == 0 {
            return Err(Error::Empty("batch"));
        }
        Ok(rows)
    }

    /// Runs the network. `Train` normalizes with batch statistics and folds
    /// them into the running statistics; `Eval` uses the running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        let (logits, cache, batch_stats) = self.run(x, mode)?;
        if mode == Mode::Train {
            let mut bn = 0;
            for l in &self.layers {
                if let LayerSpec::BatchNorm { momentum, .. } = *l {
                    let (mean, var) = &batch_stats[bn];
                    let rs = &mut self.bn_stats[bn];
                    for j in 0..mean.len() {
                        rs.mean[j] = (1.0 - momentum) * rs.mean[j] + momentum * mean[j];
                        rs.var[j] = (1.0 - momentum) * rs.var[j] + momentum * var[j];
                    }
                    bn += 1;
                }
            }
        }
        Ok((logits, cache))
    }

    /// Eval-mode forward on a shared model.
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (logits, cache, _) = self.run(x, Mode::Eval)?;
        Ok((logits, cache))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval(x)?.0)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, ForwardCache, Vec<(Vec<f64>, Vec<f64>)>)> {
        let rows = self.check_input(x)?;
        if mode == Mode::Train && !self.bn_stats.is_empty() && rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        let mut cur = x.data().to_vec();
        let mut width = self.input_dim;
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut batch_stats = Vec::new();
        let mut bn_index = 0;
        for (l, &off) in self.layers.iter().zip(&self.offsets) {
            match *l {
                LayerSpec::Linear { in_dim, out_dim } => {
                    let w = &self.params[off..off + in_dim * out_dim];
                    let b = &self.params[off + in_dim * out_dim..off + in_dim * out_dim + out_dim];
                    let mut y = vec![0.0; rows * out_dim];
                    linalg::affine_forward(&cur, rows, in_dim, w, b, &mut y);
                    entries.push(LayerCache::Linear { input: cur });
                    cur = y;
                    width = out_dim;
                }
                LayerSpec::BatchNorm { dim, eps, .. } => {
                    let gamma = &self.params[off..off + dim];
                    let beta = &self.params[off + dim..off + 2 * dim];
                    let (mean, var) = match mode {
                        Mode::Train => {
                            let (m, v) = column_moments(&cur, rows, dim);
                            batch_stats.push((m.clone(), v.clone()));
                            (m, v)
                        }
                        Mode::Eval => {
                            let s = &self.bn_stats[bn_index];
                            (s.mean.clone(), s.var.clone())
                        }
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let mut xhat = vec![0.0; rows * dim];
                    let mut y = vec![0.0; rows * dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            let i = r * dim + j;
                            xhat[i] = (cur[i] - mean[j]) * inv_std[j];
                            y[i] = gamma[j] * xhat[i] + beta[j];
                        }
                    }
                    entries.push(LayerCache::BatchNorm {
                        input: cur,
                        xhat,
                        inv_std,
                        batch_stats: mode == Mode::Train,
                    });
                    cur = y;
                    bn_index += 1;
                }
                LayerSpec::Relu => {
                    let y: Vec<f64> = cur.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                    entries.push(LayerCache::Relu { input: cur });
                    cur = y;
                }
            }
        }
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        let cache = ForwardCache {
            model_id: self.id,
            generation: self.generation,
            batch: rows,
            entries,
        };
        Ok((
            Tensor::from_parts(vec![rows, width], cur),
            cache,
            batch_stats,
        ))
    }

    /// Gradients of a scalar loss with respect to every parameter and the input batch.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor) -> Result<Gradients> {
        self.backward_with_bn_taps(cache, d_logits, &[])
    }

    /// Like [`backward`](Self::backward), additionally injecting `taps[l]`
    /// (`[batch, dim]`) as an extra gradient on the input of batch-norm layer `l`.
    /// An empty `taps` slice means no injection.
    pub fn backward_with_bn_taps(
        &self,
        cache: &ForwardCache,
        d_logits: &Tensor,
        taps: &[Vec<f64>],
    ) -> Result<Gradients> {
        if cache.model_id != self.id || cache.generation != self.generation {
            return Err(Error::StaleCache(
                "parameters changed or cache came from another model".into(),
            ));
        }
        if cache.entries.len() != self.layers.len() {
            return Err(Error::StaleCache("layer count differs".into()));
        }
        let rows = cache.batch;
        let (dr, dc) = d_logits.dims2()?;
        if dr != rows || dc != self.num_classes {
            return Err(Error::shape(format!(
                "upstream gradient is {dr}x{dc}, expected {rows}x{}",
                self.num_classes
            )));
        }
        if !taps.is_empty() && taps.len() != self.bn_stats.len() {
            return Err(Error::shape(format!(
                "{} batch-norm taps for {} batch-norm layers",
                taps.len(),
                self.bn_stats.len()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut g = d_logits.data().to_vec();
        let mut bn_index = self.bn_stats.len();
        for ((l, &off), entry) in self
            .layers
            .iter()
            .zip(&self.offsets)
            .zip(&cache.entries)
            .rev()
        {
            match (*l, entry) {
                (LayerSpec::Linear { in_dim, out_dim }, LayerCache::Linear { input }) => {
                    let (dw, db) =
                        grads[off..off + in_dim * out_dim + out_dim].split_at_mut(in_dim * out_dim);
                    linalg::affine_param_grad(input, &g, rows, in_dim, out_dim, dw, db);
                    let mut dx = vec![0.0; rows * in_dim];
                    linalg::affine_input_grad(
                        &g,
                        rows,
                        in_dim,
                        out_dim,
                        &self.params[off..off + in_dim * out_dim],
                        &mut dx,
                    );
                    g = dx;
                }
                (
                    LayerSpec::BatchNorm { dim, .. },
                    LayerCache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_stats,
                        ..
                    },
                ) => {
                    bn_index -= 1;
                    let gamma = &self.params[off..off + dim];
                    let mut dgamma = vec![0.0; dim];
                    let mut dbeta = vec![0.0; dim];
                    for r in 0..rows {
                        for j in 0..dim {
                            let i = r * dim + j;
                            dgamma[j] += g[i] * xhat[i];
                            dbeta[j] += g[i];
                        }
                    }
                    let mut dx = vec![0.0; rows * dim];
                    if *batch_stats {
                        let n = rows as f64;
                        for r in 0..rows {
                            for j in 0..dim {
                                let i = r * dim + j;
                                dx[i] = gamma[j] * inv_std[j] / n
                                    * (n * g[i] - dbeta[j] - xhat[i] * dgamma[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..dim {
                                let i = r * dim + j;
                                dx[i] = g[i] * gamma[j] * inv_std[j];
                            }
                        }
                    }
                    if let Some(tap) = taps.get(bn_index) {
                        if tap.len() != dx.len() {
                            return Err(Error::shape("batch-norm tap has the wrong length"));
                        }
                        for (d, t) in dx.iter_mut().zip(tap) {
                            *d += t;
                        }
                    }
                    grads[off..off + dim].copy_from_slice(&dgamma);
                    grads[off + dim..off + 2 * dim].copy_from_slice(&dbeta);
                    g = dx;
                }
                (LayerSpec::Relu, LayerCache::Relu { input }) => {
                    for (gi, &xi) in g.iter_mut().zip(input) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                }
                _ => {
                    return Err(Error::StaleCache(
                        "cache entry does not match layer kind".into(),
                    ))
                }
            }
        }
        Ok(Gradients {
            params: grads,
            input: Tensor::from_parts(vec![rows, self.input_dim], g),
        })
    }
}

/// Per-column mean and biased variance of a `[rows, dim]` block.
pub fn column_moments(x: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows as f64;
    let mut mean = vec![0.0; dim];
    for r in 0..rows {
        for (m, v) in mean.iter_mut().zip(&x[r * dim..(r + 1) * dim]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for r in 0..rows {
        for ((s, v), m) in var.iter_mut().zip(&x[r * dim..(r + 1) * dim]).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut var {
        *s /= n;
    }
    (mean, var)
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
