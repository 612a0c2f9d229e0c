//! Helpers shared by the integration tests.
#![allow(dead_code)]

use flmg::diffusion::NoiseSchedule;
use flmg::nn::{Architecture, ClassifierModel, LayerSpec, Mode, Tensor};
use flmg::rng::fill_normal;
use rand::Rng;

pub const H: f64 = 1e-5;

/// Relative error with a floor of 1e-4 on the denominator: central
/// differences carry rounding noise near 1e-10 at h = 1e-5, so entries below
/// the floor are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let mut v = vec![0.0; shape.iter().product()];
    fill_normal(rng, &mut v);
    Tensor::new(shape, v).unwrap()
}

/// Random BN MLP with perturbed affine parameters and running statistics.
pub fn random_model<R: Rng>(rng: &mut R, with_bn: bool) -> (ClassifierModel, usize) {
    let d = rng.random_range(2..10);
    let c = rng.random_range(2..6);
    let depth = rng.random_range(1..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..16)).collect();
    let mut model = if with_bn {
        ClassifierModel::new(&Architecture::mlp(d, &hidden, c), rng).unwrap()
    } else {
        let mut layers = Vec::new();
        let mut fan_in = d;
        for &h in &hidden {
            layers.push(LayerSpec::Linear {
                in_dim: fan_in,
                out_dim: h,
            });
            layers.push(LayerSpec::Relu);
            fan_in = h;
        }
        layers.push(LayerSpec::Linear {
            in_dim: fan_in,
            out_dim: c,
        });
        ClassifierModel::from_layers(d, layers, rng).unwrap()
    };
    for p in model.params_mut() {
        *p += 0.3 * (rng.random::<f64>() - 0.5);
    }
    for s in model.bn_stats_mut() {
        for m in &mut s.mean {
            *m = rng.random::<f64>() - 0.5;
        }
        for v in &mut s.var {
            *v = 0.5 + rng.random::<f64>();
        }
    }
    (model, d)
}

/// Scalar probe `Σ w ⊙ logits`, so the upstream gradient is `w`.
pub fn probe(model: &ClassifierModel, x: &Tensor, w: &Tensor, mode: Mode) -> f64 {
    let mut m = model.clone();
    let (logits, _) = m.forward(x, mode).unwrap();
    logits.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

pub fn check_model(
    model: &ClassifierModel,
    d: usize,
    rng: &mut impl Rng,
    mode: Mode,
    tol: f64,
) -> f64 {
    let worst = model_fd_error(model, d, rng, mode);
    assert!(worst < tol, "worst relative error {worst:e} ≥ {tol:e}");
    worst
}

/// Worst relative error over all parameter and input gradients of a random probe.
pub fn model_fd_error(model: &ClassifierModel, d: usize, rng: &mut impl Rng, mode: Mode) -> f64 {
    let b = rng.random_range(2..7);
    let x = randn(rng, vec![b, d]);
    let mut m = model.clone();
    let (logits, cache) = m.forward(&x, mode).unwrap();
    let w = randn(rng, logits.shape().to_vec());
    let grads = m.backward(&cache, &w).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.param_count() {
        let mut plus = model.clone();
        plus.params_mut()[i] += H;
        let mut minus = model.clone();
        minus.params_mut()[i] -= H;
        let num = (probe(&plus, &x, &w, mode) - probe(&minus, &x, &w, mode)) / (2.0 * H);
        worst = worst.max(rel_err(grads.params[i], num));
    }
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let num = (probe(model, &xp, &w, mode) - probe(model, &xm, &w, mode)) / (2.0 * H);
        worst = worst.max(rel_err(grads.input.data()[i], num));
    }
    worst
}

pub fn fd_input<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor, analytic: &Tensor) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let num = (f(&xp) - f(&xm)) / (2.0 * H);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

/// Random linear schedule with ᾱ_T ≳ 1e-7. Below that, dividing by √ᾱ in
/// the clean-sample estimate amplifies one ulp of s_t past 1e-9.
pub fn random_schedule<R: Rng>(rng: &mut R) -> NoiseSchedule {
    let t = rng.random_range(2..1000);
    let lo = 10f64
        .powf(rng.random_range(-5.0..-2.0))
        .min(15.0 / t as f64);
    let cap = (30.0 / t as f64 - lo).min(0.3);
    let hi = lo + rng.random::<f64>() * (cap - lo).max(0.0);
    let eta = if rng.random::<bool>() {
        rng.random::<f64>()
    } else {
        1.0
    };
    let steps = rng.random_range(1..=t);
    NoiseSchedule::linear(t, lo, hi, eta)
        .unwrap()
        .with_sampling_steps(steps)
        .unwrap()
}
