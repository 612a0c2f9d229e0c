//! Reverse-trajectory runner shared by plain and guided sampling.
//!
//! Sample `i` of a request owns the random stream `(seed, i)`: its initial
//! noise and every per-step noise draw come from that stream alone, so a
//! sample does not depend on which batch it is computed in.

use rayon::prelude::*;

use super::epsnet::EpsNet;
use super::process::ddim_values;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::{self, fill_normal};

pub const DEFAULT_SAMPLE_BATCH: usize = 64;

/// Called once per reverse step with `(t, s_t, ε_raw, per-row conditions)`;
/// returns the noise estimate the step should use.
pub type EpsHook<'a> =
    dyn Fn(usize, &Tensor, Tensor, &[Option<usize>]) -> Result<Tensor> + Sync + 'a;

/// Batching of a request of `n` chains.
#[derive(Debug, Clone, Copy)]
pub struct Batching {
    pub batch_size: usize,
    /// Fill the last batch up to `batch_size` by wrapping around to the first
    /// chains; the padded rows are dropped from the result.
    pub pad_last: bool,
}

pub(crate) fn run_chains(
    net: &EpsNet,
    sched: &NoiseSchedule,
    conds: &[Option<usize>],
    seed: u64,
    batching: Batching,
    hook: Option<&EpsHook<'_>>,
) -> Result<Tensor> {
    net.check_schedule(sched)?;
    let dim = net.dim();
    let n = conds.len();
    if n == 0 {
        return Ok(Tensor::from_parts(vec![0, dim], Vec::new()));
    }
    if batching.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(batching.batch_size)
        .map(|c| {
            let mut c = c.to_vec();
            if batching.pad_last {
                let mut k = 0;
                while c.len() < batching.batch_size {
                    c.push(k % n);
                    k += 1;
                }
            }
            c
        })
        .collect();
    let pairs = sched.sampling_pairs();
    let results: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            let rows = chunk.len();
            let chunk_conds: Vec<Option<usize>> = chunk.iter().map(|&i| conds[i]).collect();
            let ts = vec![0usize; rows];
            let mut streams: Vec<_> = chunk.iter().map(|&i| rng::stream(seed, i as u64)).collect();
            let mut s = vec![0.0; rows * dim];
            for (r, st) in streams.iter_mut().enumerate() {
                fill_normal(st, &mut s[r * dim..(r + 1) * dim]);
            }
            let mut s = Tensor::from_parts(vec![rows, dim], s);
            for &(t, t_prev) in &pairs {
                let ts: Vec<usize> = ts.iter().map(|_| t).collect();
                let raw = net.predict(&s, &ts, &chunk_conds)?;
                let eps_hat = match hook {
                    Some(h) => h(t, &s, raw, &chunk_conds)?,
                    None => raw,
                };
                let sigma = sched.sigma_between(t, t_prev);
                let mut noise = vec![0.0; if sigma > 0.0 { rows * dim } else { 0 }];
                if sigma > 0.0 {
                    for (r, st) in streams.iter_mut().enumerate() {
                        fill_normal(st, &mut noise[r * dim..(r + 1) * dim]);
                    }
                }
                let next = ddim_values(
                    s.data(),
                    eps_hat.data(),
                    &noise,
                    sched.alpha_bar(t),
                    sched.alpha_bar(t_prev),
                    sigma,
                )?;
                s = Tensor::from_parts(vec![rows, dim], next);
            }
            Ok(s.into_data())
        })
        .collect();
    let mut out = Vec::with_capacity(n * dim);
    for (chunk, res) in chunks.iter().zip(results) {
        let data = res?;
        let start = out.len() / dim;
        let real = (n - start).min(chunk.len());
        out.extend_from_slice(&data[..real * dim]);
    }
    if out.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite("sampled values"));
    }
    Ok(Tensor::from_parts(vec![n, dim], out))
}

/// Draws `n` samples for condition `y` (`None` = unconditional), starting
/// from `s_T ~ N(0, I)` and following the schedule's sampling timesteps.
pub fn sample(
    net: &EpsNet,
    sched: &NoiseSchedule,
    y: Option<usize>,
    n: usize,
    seed: u64,
) -> Result<Tensor> {
    run_chains(
        net,
        sched,
        &vec![y; n],
        seed,
        Batching {
            batch_size: DEFAULT_SAMPLE_BATCH,
            pad_last: false,
        },
        None,
    )
}
