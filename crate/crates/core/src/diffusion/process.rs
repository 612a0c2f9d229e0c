//! Forward noising, clean-sample prediction and the deterministic/stochastic
//! reverse step. Every alpha here is the cumulative product.

use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::Tensor;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `s_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(x0, eps, "q_sample")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Tensor::from_parts(x0.shape().to_vec(), data))
}

/// Clean-sample estimate `(s_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(
    s_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_t(t)?;
    same_shape(s_t, eps_hat, "predict_x0")?;
    let ab = sched.alpha_bar(t);
    let data = predict_x0_values(s_t.data(), eps_hat.data(), ab);
    Ok(Tensor::from_parts(s_t.shape().to_vec(), data))
}

pub(crate) fn predict_x0_values(s_t: &[f64], eps_hat: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (sa, sb) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    s_t.iter()
        .zip(eps_hat)
        .map(|(s, e)| (s - sb * e) / sa)
        .collect()
}

/// One reverse step from `t` to `t − 1` using the schedule's own `σ_t`.
pub fn ddim_step(
    s_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    ddim_step_between(s_t, eps_hat, t, t - 1, sched.sigma(t), sched, noise)
}

/// Reverse step from `t` to any earlier `t_prev` with noise scale `sigma`:
/// `√ᾱ_prev·x̂₀ + √(1−ᾱ_prev−σ²)·ε̂ + σ·z`.
pub fn ddim_step_between(
    s_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sigma: f64,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!(
            "reverse step must go backwards: {t} → {t_prev}"
        )));
    }
    same_shape(s_t, eps_hat, "ddim_step")?;
    if sigma > 0.0 {
        same_shape(s_t, noise, "ddim_step noise")?;
    }
    let data = ddim_values(
        s_t.data(),
        eps_hat.data(),
        noise.data(),
        sched.alpha_bar(t),
        sched.alpha_bar(t_prev),
        sigma,
    )?;
    Ok(Tensor::from_parts(s_t.shape().to_vec(), data))
}

pub(crate) fn ddim_values(
    s_t: &[f64],
    eps_hat: &[f64],
    noise: &[f64],
    ab_t: f64,
    ab_prev: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    let mut dir = 1.0 - ab_prev - sigma * sigma;
    if dir < 0.0 {
        if dir > -1e-12 {
            dir = 0.0;
        } else {
            return Err(Error::Schedule(format!("1 − ᾱ_prev − σ² = {dir} < 0")));
        }
    }
    let (c0, c1) = (ab_prev.sqrt(), dir.sqrt());
    let x0 = predict_x0_values(s_t, eps_hat, ab_t);
    let mut out: Vec<f64> = x0
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| c0 * x + c1 * e)
        .collect();
    if sigma > 0.0 {
        for (o, z) in out.iter_mut().zip(noise) {
            *o += sigma * z;
        }
    }
    Ok(out)
}
