//! Procedural glyph corpora with class-specific shapes and context-specific
//! styles, the two skew partitioners, and the server pretraining corpus.
//!
//! Each image is `side × side` grayscale in `[-1, 1]`. The class picks the
//! glyph; the context picks background level, intensity ramp, glyph
//! contrast, and a sinusoidal texture.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, standard_normal};

const TRAIN_FRACTION: f64 = 0.8;
const SERVER_STREAM: u64 = 0x5E4E_4E52;
const MAX_PARTITION_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyCorpusConfig {
    #[serde(default = "default_side")]
    pub image_side: usize,
    pub num_classes: usize,
    pub num_contexts: usize,
    pub samples_per_cell: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_side() -> usize {
    12
}

fn default_noise() -> f64 {
    0.15
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            image_side: 12,
            num_classes: 4,
            num_contexts: 8,
            samples_per_cell: 60,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl ToyCorpusConfig {
    pub fn dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if self.num_classes > GLYPHS {
            return Err(Error::invalid(format!("at most {GLYPHS} glyph classes")));
        }
        if self.num_contexts < 1 {
            return Err(Error::invalid("need at least one context"));
        }
        if self.image_side < 4 {
            return Err(Error::invalid("image side must be at least 4"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be a non-negative number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
    /// Context (style) index for generated corpora.
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.x.len() != self.dim {
            return Err(Error::shape(format!(
                "sample of length {} in a {}-dim dataset",
                sample.x.len(),
                self.dim
            )));
        }
        if sample.label >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label: sample.label,
                classes: self.num_classes,
            });
        }
        self.samples.push(sample);
        Ok(())
    }

    /// `[indices.len(), dim]` feature matrix.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].x);
        }
        Tensor::from_parts(vec![indices.len(), self.dim], data)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].label).collect()
    }

    pub fn features(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    pub fn all_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }

    pub fn contexts(&self) -> BTreeSet<usize> {
        self.samples.iter().map(|s| s.context).collect()
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let mut out = Dataset::new(first.dim, first.num_classes);
        for p in parts {
            if p.dim != out.dim || p.num_classes != out.num_classes {
                return Err(Error::shape(
                    "datasets disagree on dimension or class count",
                ));
            }
            out.samples.extend(p.samples.iter().cloned());
        }
        Ok(out)
    }

    pub fn filter(&self, mut keep: impl FnMut(&Sample) -> bool) -> Dataset {
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// Train and test split of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
}

const GLYPHS: usize = 8;

fn glyph(class: usize, side: usize, dx: i64, dy: i64) -> Vec<f64> {
    let s = side as i64;
    let c = s / 2;
    let q = s / 4;
    let mut img = vec![0.0; side * side];
    let mut set = |x: i64, y: i64| {
        let (x, y) = (x + dx, y + dy);
        if (0..s).contains(&x) && (0..s).contains(&y) {
            img[(y * s + x) as usize] = 1.0;
        }
    };
    match class {
        // horizontal bar
        0 => {
            for x in q..s - q {
                set(x, c - 1);
                set(x, c);
            }
        }
        // vertical bar
        1 => {
            for y in q..s - q {
                set(c - 1, y);
                set(c, y);
            }
        }
        // diagonal cross
        2 => {
            for i in q..s - q {
                set(i, i);
                set(s - 1 - i, i);
            }
        }
        // filled square
        3 => {
            for y in c - 2..c + 2 {
                for x in c - 2..c + 2 {
                    set(x, y);
                }
            }
        }
        // ring
        4 => {
            for i in c - 3..c + 3 {
                set(i, c - 3);
                set(i, c + 2);
                set(c - 3, i);
                set(c + 2, i);
            }
        }
        // plus
        5 => {
            for i in q..s - q {
                set(i, c);
                set(c, i);
            }
        }
        // corner
        6 => {
            for i in q..s - q {
                set(q, i);
                set(i, s - q - 1);
            }
        }
        // anti-diagonal stroke
        _ => {
            for i in 1..s - 1 {
                set(s - 1 - i, i);
                set(s - i, i);
            }
        }
    }
    img
}

/// Visual style of one context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextStyle {
    pub base: f64,
    pub ramp_angle: f64,
    pub ramp_slope: f64,
    pub contrast: f64,
    pub texture_freq: f64,
    pub texture_angle: f64,
    pub texture_amp: f64,
}

impl ContextStyle {
    pub fn for_context(c: usize) -> Self {
        let u = |k: f64| ((c as f64 + 1.0) * k).fract();
        Self {
            base: -0.45 + 0.6 * u(0.618_034),
            ramp_angle: 2.0 * PI * u(0.414_214),
            ramp_slope: 0.15 + 0.25 * u(0.732_051),
            contrast: 0.55 + 0.5 * u(0.236_068),
            texture_freq: 1.0 + (c % 4) as f64,
            texture_angle: PI * u(0.302_776),
            texture_amp: 0.08 + 0.1 * u(0.854_102),
        }
    }
}

fn render<R: Rng + ?Sized>(
    class: usize,
    context: usize,
    cfg: &ToyCorpusConfig,
    rng: &mut R,
) -> Vec<f64> {
    let side = cfg.image_side;
    let style = ContextStyle::for_context(context);
    let dx = rng.random_range(-1i64..=1);
    let dy = rng.random_range(-1i64..=1);
    let amp = rng.random_range(0.8..1.2);
    let phase = rng.random_range(0.0..2.0 * PI);
    let g = glyph(class, side, dx, dy);
    let half = (side as f64 - 1.0) / 2.0;
    let (rc, rs) = (style.ramp_angle.cos(), style.ramp_angle.sin());
    let (tc, ts) = (style.texture_angle.cos(), style.texture_angle.sin());
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (u, v) = ((x as f64 - half) / half, (y as f64 - half) / half);
            let ramp = style.ramp_slope * (rc * u + rs * v);
            let tex =
                style.texture_amp * (PI * style.texture_freq * (tc * u + ts * v) + phase).sin();
            let fg = style.contrast * amp * g[y * side + x];
            let val = style.base + ramp + tex + fg + cfg.noise * standard_normal(rng);
            img.push(val.clamp(-1.0, 1.0));
        }
    }
    img
}

fn corpus_for_contexts(cfg: &ToyCorpusConfig, contexts: &[usize], seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(seed);
    let mut ds = Dataset::new(cfg.dim(), cfg.num_classes);
    for &context in contexts {
        for class in 0..cfg.num_classes {
            for _ in 0..cfg.samples_per_cell {
                let x = render(class, context, cfg, &mut rng);
                ds.samples.push(Sample {
                    x,
                    label: class,
                    context,
                });
            }
        }
    }
    Ok(ds)
}

/// Every (class, context) cell with `samples_per_cell` images.
pub fn make_corpus(cfg: &ToyCorpusConfig) -> Result<Dataset> {
    let contexts: Vec<usize> = (0..cfg.num_contexts).collect();
    corpus_for_contexts(cfg, &contexts, cfg.seed)
}

/// Contexts covered by the server corpus at a given overlap. Contexts are
/// dropped from the low end, where the feature-skew partition puts clients.
pub fn server_contexts(num_contexts: usize, overlap: f64) -> Result<Vec<usize>> {
    if !(overlap > 0.0 && overlap <= 1.0) {
        return Err(Error::invalid(format!("overlap {overlap} outside (0, 1]")));
    }
    let keep = ((overlap * num_contexts as f64).round() as usize).clamp(1, num_contexts);
    Ok((num_contexts - keep..num_contexts).collect())
}

/// Server pretraining corpus, drawn from a stream independent of the client corpus.
pub fn server_corpus(cfg: &ToyCorpusConfig, overlap: f64) -> Result<Dataset> {
    let contexts = server_contexts(cfg.num_contexts, overlap)?;
    corpus_for_contexts(cfg, &contexts, rng::derive_seed(cfg.seed, SERVER_STREAM))
}

fn stratified_split<R: Rng + ?Sized>(ds: &Dataset, rng: &mut R) -> ClientData {
    let mut train = Dataset::new(ds.dim, ds.num_classes);
    let mut test = Dataset::new(ds.dim, ds.num_classes);
    for class in 0..ds.num_classes {
        let idx: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.samples[i].label == class)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let perm = rng::permutation(rng, idx.len());
        let n_train = (idx.len() as f64 * TRAIN_FRACTION).round() as usize;
        for (rank, &p) in perm.iter().enumerate() {
            let s = ds.samples[idx[p]].clone();
            if rank < n_train {
                train.samples.push(s);
            } else {
                test.samples.push(s);
            }
        }
    }
    if test.is_empty() && train.len() >= 3 {
        let s = train.samples.pop().unwrap();
        test.samples.push(s);
    }
    ClientData { train, test }
}

/// Client `k` receives every sample of context `k`, split 80/20 per class.
pub fn partition_feature_skew(corpus: &Dataset, k: usize, seed: u64) -> Result<Vec<ClientData>> {
    let contexts = corpus.contexts();
    if k == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if k > contexts.len() {
        return Err(Error::invalid(format!(
            "{k} clients but only {} contexts",
            contexts.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    Ok(contexts
        .iter()
        .take(k)
        .map(|&c| {
            let part = corpus.filter(|s| s.context == c);
            stratified_split(&part, &mut rng)
        })
        .collect())
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: f64, k: usize) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid(format!("dirichlet: {e}")))?;
    for _ in 0..MAX_PARTITION_RETRIES {
        let g: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = g.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(g.into_iter().map(|v| v / sum).collect());
        }
    }
    Err(Error::invalid("dirichlet draw underflowed repeatedly"))
}

/// Splits every class across the `k` clients with Dirichlet(`alpha`)
/// proportions, then splits each client 80/20 per class.
pub fn partition_label_skew(
    corpus: &Dataset,
    k: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientData>> {
    if k == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if !(alpha > 0.0) {
        return Err(Error::invalid("alpha must be positive"));
    }
    let mut rng = rng::seeded(seed);
    for _ in 0..MAX_PARTITION_RETRIES {
        let mut parts: Vec<Dataset> = (0..k)
            .map(|_| Dataset::new(corpus.dim, corpus.num_classes))
            .collect();
        for class in 0..corpus.num_classes {
            let idx: Vec<usize> = (0..corpus.len())
                .filter(|&i| corpus.samples[i].label == class)
                .collect();
            let perm = rng::permutation(&mut rng, idx.len());
            let props = dirichlet(&mut rng, alpha, k)?;
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == k {
                    idx.len()
                } else {
                    ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
                };
                for &pi in &perm[start..end] {
                    parts[client].samples.push(corpus.samples[idx[pi]].clone());
                }
                start = end;
            }
        }
        if parts.iter().all(|p| p.len() >= 5) {
            return Ok(parts
                .iter()
                .map(|p| stratified_split(p, &mut rng))
                .collect());
        }
    }
    Err(Error::invalid(format!(
        "label-skew partition left a client nearly empty after {MAX_PARTITION_RETRIES} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ToyCorpusConfig {
        ToyCorpusConfig {
            samples_per_cell: 10,
            ..ToyCorpusConfig::default()
        }
    }

    #[test]
    fn corpus_is_deterministic_and_counted() {
        let cfg = small_cfg();
        let a = make_corpus(&cfg).unwrap();
        let b = make_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        for class in 0..cfg.num_classes {
            for ctx in 0..cfg.num_contexts {
                let n = a
                    .samples
                    .iter()
                    .filter(|s| s.label == class && s.context == ctx)
                    .count();
                assert_eq!(n, cfg.samples_per_cell);
            }
        }
        assert!(a
            .samples
            .iter()
            .all(|s| s.x.iter().all(|v| (-1.0..=1.0).contains(v))));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = small_cfg();
        cfg.num_classes = 1;
        assert!(make_corpus(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.num_contexts = 0;
        assert!(make_corpus(&cfg).is_err());
        let mut cfg = small_cfg();
        cfg.image_side = 3;
        assert!(make_corpus(&cfg).is_err());
    }

    #[test]
    fn feature_skew_is_an_exact_partition() {
        let corpus = make_corpus(&small_cfg()).unwrap();
        let clients = partition_feature_skew(&corpus, 4, 1).unwrap();
        assert_eq!(clients.len(), 4);
        let mut total = 0;
        for (k, c) in clients.iter().enumerate() {
            assert_eq!(c.train.label_set(), (0..4).collect());
            assert!(c
                .train
                .samples
                .iter()
                .chain(&c.test.samples)
                .all(|s| s.context == k));
            assert_eq!(c.train.len(), 4 * 8);
            assert_eq!(c.test.len(), 4 * 2);
            total += c.train.len() + c.test.len();
        }
        assert_eq!(
            total,
            corpus.samples.iter().filter(|s| s.context < 4).count()
        );
        assert!(partition_feature_skew(&corpus, 9, 1).is_err());
    }

    #[test]
    fn label_skew_conserves_samples() {
        let mut cfg = small_cfg();
        cfg.num_contexts = 1;
        cfg.samples_per_cell = 100;
        let corpus = make_corpus(&cfg).unwrap();
        let clients = partition_label_skew(&corpus, 4, 0.5, 3).unwrap();
        let total: usize = clients.iter().map(|c| c.train.len() + c.test.len()).sum();
        assert_eq!(total, corpus.len());
    }

    #[test]
    fn label_skew_large_alpha_is_uniform() {
        let mut cfg = small_cfg();
        cfg.num_contexts = 1;
        cfg.samples_per_cell = 200;
        let corpus = make_corpus(&cfg).unwrap();
        let clients = partition_label_skew(&corpus, 4, 1e6, 3).unwrap();
        for c in clients {
            let all = Dataset::concat(&[&c.train, &c.test]).unwrap();
            let counts = all.class_counts();
            let n: usize = counts.iter().sum();
            for k in counts {
                assert!((k as f64 / n as f64 - 0.25).abs() < 0.05);
            }
        }
    }

    #[test]
    fn label_skew_small_alpha_concentrates() {
        let mut cfg = small_cfg();
        cfg.num_contexts = 1;
        cfg.samples_per_cell = 100;
        let corpus = make_corpus(&cfg).unwrap();
        let mut hits = 0;
        for seed in 0..10 {
            let clients = partition_label_skew(&corpus, 4, 0.1, seed).unwrap();
            let concentrated = clients.iter().any(|c| {
                let all = Dataset::concat(&[&c.train, &c.test]).unwrap();
                let counts = all.class_counts();
                let n: usize = counts.iter().sum();
                *counts.iter().max().unwrap() as f64 >= 0.6 * n as f64
            });
            if concentrated {
                hits += 1;
            }
        }
        assert_eq!(hits, 10);
    }

    #[test]
    fn server_overlap_rules() {
        assert_eq!(server_contexts(8, 1.0).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(server_contexts(8, 0.5).unwrap(), (4..8).collect::<Vec<_>>());
        assert_eq!(server_contexts(8, 0.01).unwrap(), vec![7]);
        assert!(server_contexts(8, 0.0).is_err());
        assert!(server_contexts(8, 1.2).is_err());
        let cfg = small_cfg();
        let full = server_corpus(&cfg, 1.0).unwrap();
        let corpus = make_corpus(&cfg).unwrap();
        let cells = |d: &Dataset| {
            d.samples
                .iter()
                .map(|s| (s.label, s.context))
                .collect::<BTreeSet<_>>()
        };
        assert_eq!(cells(&full), cells(&corpus));
        assert_ne!(full.samples[0].x, corpus.samples[0].x);
    }
}
