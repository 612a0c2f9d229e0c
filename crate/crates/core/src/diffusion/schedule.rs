use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of a linear-beta schedule as they appear in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub eta: f64,
    /// Reverse steps used at sampling time (uniform stride over `steps`).
    pub sampling_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_min: 5e-4,
            beta_max: 0.1,
            eta: 0.0,
            sampling_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max, self.eta)?
            .with_sampling_steps(self.sampling_steps)
    }
}

/// Forward-noising schedule. Index conventions: `beta(t)` and `sigma(t)` for
/// `1 ≤ t ≤ T`; `alpha_bar(t)` for `0 ≤ t ≤ T` with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    eta: f64,
    sampling: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear interpolation of betas between `beta_min` and `beta_max`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min ≤ beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas, eta)
    }

    pub fn from_betas(betas: Vec<f64>, eta: f64) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        let sigma = (1..=betas.len())
            .map(|t| ddim_sigma(eta, alpha_bar[t], alpha_bar[t - 1]))
            .collect();
        let sampling = (1..=betas.len()).rev().collect();
        Ok(Self {
            betas,
            alpha_bar,
            sigma,
            eta,
            sampling,
        })
    }

    /// Uses `k` reverse steps spread uniformly over `1..=T`.
    pub fn with_sampling_steps(mut self, k: usize) -> Result<Self> {
        let t_max = self.steps();
        if k == 0 || k > t_max {
            return Err(Error::invalid(format!(
                "sampling steps {k} outside 1..={t_max}"
            )));
        }
        let mut ts: Vec<usize> = (1..=k)
            .map(|i| ((i * t_max) as f64 / k as f64).round() as usize)
            .collect();
        ts.dedup();
        ts.reverse();
        self.sampling = ts;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// Descending timesteps visited by the sampler; each is followed by the
    /// next entry, and the last one steps to 0.
    pub fn sampling_timesteps(&self) -> &[usize] {
        &self.sampling
    }

    /// `(t, t_prev)` pairs of the reverse trajectory.
    pub fn sampling_pairs(&self) -> Vec<(usize, usize)> {
        self.sampling
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, self.sampling.get(i + 1).copied().unwrap_or(0)))
            .collect()
    }

    /// Noise scale for a jump from `t` to `t_prev` under this schedule's eta.
    pub fn sigma_between(&self, t: usize, t_prev: usize) -> f64 {
        ddim_sigma(self.eta, self.alpha_bar[t], self.alpha_bar[t_prev])
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }
}

fn ddim_sigma(eta: f64, ab_t: f64, ab_prev: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let v = ((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - ab_t / ab_prev);
    eta * v.max(0.0).sqrt()
}
