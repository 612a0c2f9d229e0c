//! Client-model guidance of the reverse diffusion trajectory.
//!
//! At every reverse step the clean sample is estimated from the unmodified
//! noise prediction, the client classifier scores that estimate with
//! cross-entropy plus batch-norm statistic matching, and the loss gradient
//! (treating the noise network as constant) bends the noise prediction so
//! that the next clean estimate has lower loss.

use serde::{Deserialize, Serialize};

use crate::diffusion::sampler::{run_chains, Batching, EpsHook};
use crate::diffusion::{predict_x0, EpsNet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::federation::SyntheticRecord;
use crate::nn::{column_moments, cross_entropy, ClassifierModel, ForwardCache, Tensor};

/// How the guidance strength varies along the reverse trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceWeighting {
    /// `ε̂ = ε − √(1−ᾱ_t)·guide_scale·∇_{s_t}(−L)` with a fixed scale. The
    /// clean estimate then moves by `(1−ᾱ_t)/ᾱ_t·guide_scale·∇_{x̂₀}L`, which
    /// explodes at high noise unless `guide_scale` is tiny.
    Constant,
    /// Same correction with the scale multiplied by `B·ᾱ_t/(1−ᾱ_t)`, so every
    /// step moves the clean estimate by `−guide_scale·∇_{x̂₀}(B·L)`, a plain
    /// gradient step on the batch-summed loss.
    #[default]
    Snr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default = "one")]
    pub lambda_bn: f64,
    #[serde(default = "default_scale")]
    pub guide_scale: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Weight of the cross-entropy term; 0 gives BN-only guidance.
    #[serde(default = "one")]
    pub ce_weight: f64,
    #[serde(default)]
    pub weighting: GuidanceWeighting,
    /// Per-step cap on how far guidance may move one clean estimate, as an
    /// RMS per coordinate. The default 2 is the width of the `[-1, 1]` pixel
    /// range: a longer step jumps across the whole data box and only happens
    /// when the BN variance term overshoots and starts to diverge.
    #[serde(default = "default_max_shift")]
    pub max_shift_rms: f64,
}

fn one() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    0.4
}

fn default_max_shift() -> f64 {
    2.0
}

fn default_batch() -> usize {
    32
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_bn: 1.0,
            guide_scale: 0.4,
            batch_size: 32,
            ce_weight: 1.0,
            weighting: GuidanceWeighting::Snr,
            max_shift_rms: 2.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_bn", self.lambda_bn),
            ("guide_scale", self.guide_scale),
            ("ce_weight", self.ce_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        if !(self.max_shift_rms > 0.0) {
            return Err(Error::invalid(format!(
                "max_shift_rms must be positive, got {}",
                self.max_shift_rms
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("guidance batch size must be at least 2"));
        }
        Ok(())
    }

    /// No gradient ever reaches the sampler.
    pub fn is_unguided(&self) -> bool {
        self.guide_scale == 0.0 || (self.lambda_bn == 0.0 && self.ce_weight == 0.0)
    }
}

/// Squared-L2 mismatch between batch statistics of every BN input in `cache`
/// and the model's running statistics, plus `dLoss/d(BN input)` per layer.
fn bn_terms(model: &ClassifierModel, cache: &ForwardCache, weight: f64) -> (f64, Vec<Vec<f64>>) {
    let rows = cache.batch();
    let n = rows as f64;
    let mut loss = 0.0;
    let mut taps = Vec::with_capacity(model.num_bn_layers());
    for (h, stats) in cache.bn_inputs().into_iter().zip(model.bn_stats()) {
        let dim = stats.mean.len();
        let (m, v) = column_moments(h, rows, dim);
        let mut dm = vec![0.0; dim];
        let mut dv = vec![0.0; dim];
        for j in 0..dim {
            let a = m[j] - stats.mean[j];
            let b = v[j] - stats.var[j];
            loss += a * a + b * b;
            dm[j] = 2.0 * a / n;
            dv[j] = 4.0 * b / n;
        }
        let mut tap = vec![0.0; rows * dim];
        for r in 0..rows {
            for j in 0..dim {
                let i = r * dim + j;
                tap[i] = weight * (dm[j] + dv[j] * (h[i] - m[j]));
            }
        }
        taps.push(tap);
    }
    (loss, taps)
}

fn check_bn_batch(x: &Tensor, model: &ClassifierModel) -> Result<()> {
    let (rows, _) = x.dims2()?;
    if rows < 2 {
        return Err(Error::BatchTooSmall(rows));
    }
    if model.num_bn_layers() == 0 {
        return Err(Error::invalid("model has no batch-norm layers"));
    }
    Ok(())
}

/// BN statistic-matching loss of a batch and its gradient with respect to the batch.
pub fn bn_loss(x: &Tensor, model: &ClassifierModel) -> Result<(f64, Tensor)> {
    check_bn_batch(x, model)?;
    let (logits, cache) = model.forward_eval(x)?;
    let (loss, taps) = bn_terms(model, &cache, 1.0);
    let zero = Tensor::zeros(logits.shape().to_vec());
    let grads = model.backward_with_bn_taps(&cache, &zero, &taps)?;
    Ok((loss, grads.input))
}

/// `ce_weight·CE + lambda_bn·BN` on one Eval-mode forward: logits use the
/// running statistics, the BN term uses the batch statistics of each BN input.
pub fn guidance_loss(
    x: &Tensor,
    labels: &[usize],
    model: &ClassifierModel,
    cfg: &GuidanceConfig,
) -> Result<(f64, Tensor)> {
    let use_bn = cfg.lambda_bn != 0.0;
    if use_bn {
        check_bn_batch(x, model)?;
    }
    let (logits, cache) = model.forward_eval(x)?;
    let (ce, mut d_logits) = cross_entropy(&logits, labels)?;
    let mut loss = ce;
    if cfg.ce_weight != 1.0 {
        loss = cfg.ce_weight * ce;
        d_logits = d_logits.scaled(cfg.ce_weight);
    }
    let taps = if use_bn {
        let (bn, taps) = bn_terms(model, &cache, cfg.lambda_bn);
        loss += cfg.lambda_bn * bn;
        taps
    } else {
        Vec::new()
    };
    let grads = model.backward_with_bn_taps(&cache, &d_logits, &taps)?;
    Ok((loss, grads.input))
}

/// Loss at the clean estimate built from `eps_raw`, and its gradient with
/// respect to `s_t` with the noise prediction held fixed:
/// `∇_{s_t} L = ∇_{x̂₀} L / √ᾱ_t`.
pub fn guidance_gradient(
    s_t: &Tensor,
    eps_raw: &Tensor,
    t: usize,
    labels: &[usize],
    model: &ClassifierModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<(f64, Tensor)> {
    let x0 = predict_x0(s_t, eps_raw, t, sched)?;
    let (loss, g) = guidance_loss(&x0, labels, model, cfg)?;
    Ok((loss, g.scaled(1.0 / sched.alpha_bar(t).sqrt())))
}

/// Effective scale of the noise correction at a step with cumulative `alpha_bar`
/// on a batch of `rows` samples.
pub fn step_scale(cfg: &GuidanceConfig, alpha_bar: f64, rows: usize) -> f64 {
    match cfg.weighting {
        GuidanceWeighting::Constant => cfg.guide_scale,
        GuidanceWeighting::Snr => cfg.guide_scale * rows as f64 * alpha_bar / (1.0 - alpha_bar),
    }
}

/// Classifier-guidance noise correction `ε̂ = ε − √(1−ᾱ)·scale·g`, where `g`
/// is the gradient of the log-likelihood being climbed.
pub fn modify_eps(eps_raw: f64, log_lik_grad: f64, alpha_bar: f64, scale: f64) -> f64 {
    eps_raw - (1.0 - alpha_bar).sqrt() * scale * log_lik_grad
}

/// Rescales rows of `grad` whose clean-estimate shift `factor·‖row‖` exceeds
/// `max_rms·√d`. Rows within the bound are left bit-identical.
pub fn clip_shift(grad: &mut Tensor, factor: f64, max_rms: f64) {
    let d = grad.shape()[1];
    let bound = max_rms * (d as f64).sqrt();
    for row in grad.data_mut().chunks_mut(d) {
        let shift = factor * row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if shift > bound {
            let k = bound / shift;
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
}

fn apply_guidance(
    s_t: &Tensor,
    eps_raw: Tensor,
    t: usize,
    labels: &[usize],
    model: &ClassifierModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    if cfg.is_unguided() {
        return Ok(eps_raw);
    }
    let (_, mut grad_l) = guidance_gradient(s_t, &eps_raw, t, labels, model, sched, cfg)?;
    let ab = sched.alpha_bar(t);
    let scale = step_scale(cfg, ab, labels.len());
    clip_shift(
        &mut grad_l,
        (1.0 - ab) / ab.sqrt() * scale,
        cfg.max_shift_rms,
    );
    let mut eps = eps_raw;
    // the log-likelihood being climbed is −L
    for (e, g) in eps.data_mut().iter_mut().zip(grad_l.data()) {
        *e = modify_eps(*e, -g, ab, scale);
    }
    if !eps.all_finite() {
        return Err(Error::NonFinite("guided noise estimate"));
    }
    Ok(eps)
}

/// Guided noise estimate for a batch whose rows carry `labels`.
#[allow(clippy::too_many_arguments)]
pub fn guided_eps(
    s_t: &Tensor,
    t: usize,
    labels: &[usize],
    net: &EpsNet,
    model: &ClassifierModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    sched.check_t(t)?;
    let conds: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    let ts = vec![t; labels.len()];
    let raw = net.predict(s_t, &ts, &conds)?;
    apply_guidance(s_t, raw, t, labels, model, sched, cfg)
}

/// Runs guided chains for an arbitrary list of per-chain labels. Chain `i`
/// owns stream `(seed, i)`; batches are padded by wraparound.
pub fn generate_labeled(
    net: &EpsNet,
    model: &ClassifierModel,
    labels: &[usize],
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    if model.input_dim() != net.dim() {
        return Err(Error::shape(format!(
            "classifier takes {} features, diffusion samples have {}",
            model.input_dim(),
            net.dim()
        )));
    }
    for &y in labels {
        if y >= model.num_classes() || y >= net.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: model.num_classes().min(net.num_classes()),
            });
        }
    }
    let conds: Vec<Option<usize>> = labels.iter().map(|&y| Some(y)).collect();
    let batching = Batching {
        batch_size: cfg.batch_size,
        pad_last: true,
    };
    let hook = |t: usize, s: &Tensor, raw: Tensor, c: &[Option<usize>]| -> Result<Tensor> {
        let ys: Vec<usize> = c
            .iter()
            .map(|y| y.expect("guided chains are conditional"))
            .collect();
        apply_guidance(s, raw, t, &ys, model, sched, cfg)
    };
    let hook_ref: Option<&EpsHook<'_>> = if cfg.is_unguided() { None } else { Some(&hook) };
    run_chains(net, sched, &conds, seed, batching, hook_ref)
}

/// `count` guided samples of class `y` for client `k`. Every batch holds a
/// single class, so the BN term pulls it toward the client's mixed-class
/// statistics; the server pipeline interleaves classes with
/// [`generate_labeled`] instead.
#[allow(clippy::too_many_arguments)]
pub fn generate_guided(
    net: &EpsNet,
    model: &ClassifierModel,
    k: usize,
    y: usize,
    count: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<SyntheticRecord>> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    let x = generate_labeled(net, model, &vec![y; count], sched, cfg, seed)?;
    Ok((0..count)
        .map(|i| SyntheticRecord {
            x: x.row(i).to_vec(),
            label: y,
            client: Some(k),
        })
        .collect())
}

/// Interleaves per-class requests so every generation batch mixes classes.
pub fn interleave_labels(counts: &[(usize, usize)]) -> Vec<usize> {
    let max = counts.iter().map(|&(_, n)| n).max().unwrap_or(0);
    let mut out = Vec::with_capacity(counts.iter().map(|&(_, n)| n).sum());
    for i in 0..max {
        for &(y, n) in counts {
            if i < n {
                out.push(y);
            }
        }
    }
    out
}

/// Fraction of `records` that `model` assigns to their own label.
pub fn self_agreement(model: &ClassifierModel, records: &[SyntheticRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    let x = Tensor::from_rows(&records.iter().map(|r| r.x.as_slice()).collect::<Vec<_>>())?;
    let pred = model.predict(&x)?;
    let hits = pred
        .iter()
        .zip(records)
        .filter(|(p, r)| **p == r.label)
        .count();
    Ok(hits as f64 / records.len() as f64)
}
