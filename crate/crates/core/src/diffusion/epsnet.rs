//! Class-conditional noise predictor: an MLP with a sinusoidal time
//! embedding, a learned class embedding (plus an unconditional slot) added
//! to the first hidden layer, a residual path from that layer to the last
//! hidden layer, and a learned linear map from the input straight to the
//! output (zero at initialization).
//!
//! The input skips past the MLP: `ε̂ = √ᾱ_t·o + √(1−ᾱ_t)·s_t`, where `o` is
//! the MLP output. At high noise `s_t` is already almost pure noise, so the
//! MLP error is damped by `√ᾱ_t` and the clean estimate stays bounded. The
//! net therefore carries the cumulative schedule it was built for.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::process::q_sample;
use super::schedule::NoiseSchedule;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{linalg, Adam, Tensor};
use crate::rng::{self, fill_normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsNetConfig {
    pub hidden: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
}

fn default_time_dim() -> usize {
    32
}

impl Default for EpsNetConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            time_dim: 32,
        }
    }
}

/// Parameter block offsets inside the flat buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    w_in: usize,
    b_in: usize,
    w_time: usize,
    b_time: usize,
    class_emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w_out: usize,
    b_out: usize,
    w_skip: usize,
    total: usize,
}

impl Layout {
    fn new(dim: usize, hidden: usize, time_dim: usize, classes: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let w_in = take(dim * hidden);
        let b_in = take(hidden);
        let w_time = take(time_dim * hidden);
        let b_time = take(hidden);
        let class_emb = take((classes + 1) * hidden);
        let w1 = take(hidden * hidden);
        let b1 = take(hidden);
        let w2 = take(hidden * hidden);
        let b2 = take(hidden);
        let w_out = take(hidden * dim);
        let b_out = take(dim);
        let w_skip = take(dim * dim);
        Self {
            w_in,
            b_in,
            w_time,
            b_time,
            class_emb,
            w1,
            b1,
            w2,
            b2,
            w_out,
            b_out,
            w_skip,
            total: at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    dim: usize,
    hidden: usize,
    time_dim: usize,
    num_classes: usize,
    layout: Layout,
    alpha_bar: Vec<f64>,
    params: Vec<f64>,
}

struct EpsCache {
    rows: usize,
    input: Vec<f64>,
    temb: Vec<f64>,
    conds: Vec<usize>,
    out_gain: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    h2: Vec<f64>,
    a2: Vec<f64>,
}

/// Sinusoidal embedding of an integer timestep.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn check_alpha_bar(ab: &[f64]) -> Result<()> {
    let ok = ab.len() >= 2
        && ab[0] == 1.0
        && ab.windows(2).all(|w| w[1] < w[0])
        && ab[1..].iter().all(|&a| a > 0.0 && a.is_finite());
    if !ok {
        return Err(Error::Schedule(
            "ᾱ table must start at 1 and decrease strictly inside (0, 1]".into(),
        ));
    }
    Ok(())
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl EpsNet {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_classes: usize,
        cfg: &EpsNetConfig,
        sched: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || cfg.hidden == 0 || cfg.time_dim < 2 || num_classes == 0 {
            return Err(Error::invalid("eps-net dimensions must be positive"));
        }
        let layout = Layout::new(dim, cfg.hidden, cfg.time_dim, num_classes);
        let mut params = vec![0.0; layout.total];
        let mut uniform = |off: usize, fan_in: usize, fan_out: usize, scale: f64| {
            let bound = scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[off..off + fan_in * fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        };
        let h = cfg.hidden;
        uniform(layout.w_in, dim, h, 1.0);
        uniform(layout.w_time, cfg.time_dim, h, 1.0);
        uniform(layout.class_emb, num_classes + 1, h, 1.0);
        uniform(layout.w1, h, h, 1.0);
        uniform(layout.w2, h, h, 1.0);
        uniform(layout.w_out, h, dim, 0.1);
        Ok(Self {
            dim,
            hidden: cfg.hidden,
            time_dim: cfg.time_dim,
            num_classes,
            layout,
            alpha_bar: sched.alpha_bars().to_vec(),
            params,
        })
    }

    /// Rebuilds a net from its flat parameters and the `ᾱ` table (`ᾱ_0 = 1`
    /// first) it was trained with.
    pub fn from_params(
        dim: usize,
        num_classes: usize,
        cfg: &EpsNetConfig,
        alpha_bar: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || cfg.hidden == 0 || cfg.time_dim < 2 || num_classes == 0 {
            return Err(Error::invalid("eps-net dimensions must be positive"));
        }
        check_alpha_bar(&alpha_bar)?;
        let layout = Layout::new(dim, cfg.hidden, cfg.time_dim, num_classes);
        if params.len() != layout.total {
            return Err(Error::LengthMismatch(format!(
                "eps-net needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eps-net parameters"));
        }
        Ok(Self {
            dim,
            hidden: cfg.hidden,
            time_dim: cfg.time_dim,
            num_classes,
            layout,
            alpha_bar,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn config(&self) -> EpsNetConfig {
        EpsNetConfig {
            hidden: self.hidden,
            time_dim: self.time_dim,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Cumulative schedule the skip gains come from, `ᾱ_0 = 1` first.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// Errors unless `sched` has exactly the `ᾱ` table this net was built for.
    pub fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        if sched.alpha_bars() != self.alpha_bar.as_slice() {
            return Err(Error::Schedule(format!(
                "eps-net was built for a {}-step schedule that differs from the {}-step one supplied",
                self.steps(),
                sched.steps()
            )));
        }
        Ok(())
    }

    /// Index into the class-embedding table; `None` is the unconditional slot.
    fn cond_index(&self, y: Option<usize>) -> Result<usize> {
        match y {
            None => Ok(self.num_classes),
            Some(c) if c < self.num_classes => Ok(c),
            Some(c) => Err(Error::LabelOutOfRange {
                label: c,
                classes: self.num_classes,
            }),
        }
    }

    /// Predicted noise for every row of `s_t`. `t` and `y` are per row.
    pub fn predict(&self, s_t: &Tensor, t: &[usize], y: &[Option<usize>]) -> Result<Tensor> {
        Ok(self.forward(s_t, t, y)?.0)
    }

    /// Prediction for a batch sharing one timestep and condition.
    pub fn predict_uniform(&self, s_t: &Tensor, t: usize, y: Option<usize>) -> Result<Tensor> {
        let rows = s_t.rows();
        self.predict(s_t, &vec![t; rows], &vec![y; rows])
    }

    fn forward(
        &self,
        s_t: &Tensor,
        t: &[usize],
        y: &[Option<usize>],
    ) -> Result<(Tensor, EpsCache)> {
        let (rows, cols) = s_t.dims2()?;
        if cols != self.dim {
            return Err(Error::shape(format!(
                "eps-net expects {} features, got {cols}",
                self.dim
            )));
        }
        if t.len() != rows || y.len() != rows {
            return Err(Error::shape("one timestep and one condition per row"));
        }
        let conds = y
            .iter()
            .map(|&c| self.cond_index(c))
            .collect::<Result<Vec<_>>>()?;
        if let Some(&bad) = t.iter().find(|&&ti| ti == 0 || ti > self.steps()) {
            return Err(Error::Timestep {
                t: bad,
                max: self.steps(),
            });
        }
        let (h, l, p) = (self.hidden, &self.layout, &self.params);
        let mut temb = Vec::with_capacity(rows * self.time_dim);
        for &ti in t {
            temb.extend(time_embedding(ti, self.time_dim));
        }
        let mut a0 = vec![0.0; rows * h];
        linalg::affine_forward(
            s_t.data(),
            rows,
            self.dim,
            &p[l.w_in..l.b_in],
            &p[l.b_in..l.w_time],
            &mut a0,
        );
        let mut tproj = vec![0.0; rows * h];
        linalg::affine_forward(
            &temb,
            rows,
            self.time_dim,
            &p[l.w_time..l.b_time],
            &p[l.b_time..l.class_emb],
            &mut tproj,
        );
        for r in 0..rows {
            let emb = &p[l.class_emb + conds[r] * h..l.class_emb + (conds[r] + 1) * h];
            let row = &mut a0[r * h..(r + 1) * h];
            for ((a, tp), e) in row.iter_mut().zip(&tproj[r * h..(r + 1) * h]).zip(emb) {
                *a += tp + e;
            }
        }
        relu_in_place(&mut a0);
        let mut a1 = vec![0.0; rows * h];
        linalg::affine_forward(&a0, rows, h, &p[l.w1..l.b1], &p[l.b1..l.w2], &mut a1);
        relu_in_place(&mut a1);
        let mut h2 = vec![0.0; rows * h];
        linalg::affine_forward(&a1, rows, h, &p[l.w2..l.b2], &p[l.b2..l.w_out], &mut h2);
        let mut a2 = h2.clone();
        relu_in_place(&mut a2);
        for (a, r) in a2.iter_mut().zip(&a0) {
            *a += r;
        }
        let mut out = vec![0.0; rows * self.dim];
        linalg::affine_forward(
            &a2,
            rows,
            h,
            &p[l.w_out..l.b_out],
            &p[l.b_out..l.w_skip],
            &mut out,
        );
        // learned linear skip from the input
        let mut skip = vec![0.0; rows * self.dim];
        linalg::affine_forward(
            s_t.data(),
            rows,
            self.dim,
            &p[l.w_skip..l.total],
            &vec![0.0; self.dim],
            &mut skip,
        );
        for (o, k) in out.iter_mut().zip(&skip) {
            *o += k;
        }
        let mut out_gain = Vec::with_capacity(rows);
        for (r, &ti) in t.iter().enumerate() {
            let ab = self.alpha_bar[ti];
            let (g, skip) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (o, s) in out[r * self.dim..(r + 1) * self.dim]
                .iter_mut()
                .zip(s_t.row(r))
            {
                *o = g * *o + skip * s;
            }
            out_gain.push(g);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("eps-net output"));
        }
        let cache = EpsCache {
            rows,
            input: s_t.data().to_vec(),
            temb,
            conds,
            out_gain,
            a0,
            a1,
            h2,
            a2,
        };
        Ok((Tensor::from_parts(vec![rows, self.dim], out), cache))
    }

    fn param_grads(&self, cache: &EpsCache, d_out: &[f64]) -> Vec<f64> {
        let (h, l, p, rows) = (self.hidden, &self.layout, &self.params, cache.rows);
        let mut g = vec![0.0; l.total];
        let d_out: Vec<f64> = d_out
            .chunks(self.dim)
            .zip(&cache.out_gain)
            .flat_map(|(row, &gain)| row.iter().map(move |d| d * gain))
            .collect();
        let d_out = d_out.as_slice();
        {
            let (dw, db) = g[l.w_out..l.w_skip].split_at_mut(h * self.dim);
            linalg::affine_param_grad(&cache.a2, d_out, rows, h, self.dim, dw, db);
        }
        let mut unused_bias = vec![0.0; self.dim];
        linalg::affine_param_grad(
            &cache.input,
            d_out,
            rows,
            self.dim,
            self.dim,
            &mut g[l.w_skip..l.total],
            &mut unused_bias,
        );
        let mut da2 = vec![0.0; rows * h];
        linalg::affine_input_grad(d_out, rows, h, self.dim, &p[l.w_out..l.b_out], &mut da2);
        // a2 = relu(h2) + a0
        let mut dh2 = da2.clone();
        for (d, &z) in dh2.iter_mut().zip(&cache.h2) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        {
            let (dw, db) = g[l.w2..l.w_out].split_at_mut(h * h);
            linalg::affine_param_grad(&cache.a1, &dh2, rows, h, h, dw, db);
        }
        let mut da1 = vec![0.0; rows * h];
        linalg::affine_input_grad(&dh2, rows, h, h, &p[l.w2..l.b2], &mut da1);
        for (d, &a) in da1.iter_mut().zip(&cache.a1) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        {
            let (dw, db) = g[l.w1..l.w2].split_at_mut(h * h);
            linalg::affine_param_grad(&cache.a0, &da1, rows, h, h, dw, db);
        }
        let mut da0 = vec![0.0; rows * h];
        linalg::affine_input_grad(&da1, rows, h, h, &p[l.w1..l.b1], &mut da0);
        for (d, r) in da0.iter_mut().zip(&da2) {
            *d += r;
        }
        for (d, &a) in da0.iter_mut().zip(&cache.a0) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        {
            let (dw, db) = g[l.w_in..l.w_time].split_at_mut(self.dim * h);
            linalg::affine_param_grad(&cache.input, &da0, rows, self.dim, h, dw, db);
        }
        {
            let (dw, db) = g[l.w_time..l.class_emb].split_at_mut(self.time_dim * h);
            linalg::affine_param_grad(&cache.temb, &da0, rows, self.time_dim, h, dw, db);
        }
        for r in 0..rows {
            let c = cache.conds[r];
            let emb = &mut g[l.class_emb + c * h..l.class_emb + (c + 1) * h];
            for (e, d) in emb.iter_mut().zip(&da0[r * h..(r + 1) * h]) {
                *e += d;
            }
        }
        g
    }
}

/// Batch mean of the per-sample squared error `‖ε − ε̂‖²`.
pub fn eps_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::shape("prediction and target differ in shape"));
    }
    let rows = eps.rows().max(1) as f64;
    Ok(eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dropout")]
    pub cond_dropout: f64,
    /// Anneals the learning rate to zero along a half cosine over all steps.
    #[serde(default = "default_cosine")]
    pub cosine_decay: bool,
}

fn default_cosine() -> bool {
    true
}

fn default_batch() -> usize {
    64
}

fn default_dropout() -> f64 {
    0.1
}

impl Default for EpsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            cond_dropout: 0.1,
            cosine_decay: true,
        }
    }
}

/// Trains the noise predictor with the denoising objective, replacing the
/// class label by the unconditional slot with probability `cond_dropout`.
/// Returns the mean loss of every epoch.
pub fn train_epsnet(
    net: &mut EpsNet,
    corpus: &Dataset,
    sched: &NoiseSchedule,
    cfg: &EpsTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Empty("diffusion corpus"));
    }
    if corpus.dim != net.dim {
        return Err(Error::shape(format!(
            "corpus dim {} vs eps-net dim {}",
            corpus.dim, net.dim
        )));
    }
    net.check_schedule(sched)?;
    if !(0.0..1.0).contains(&cfg.cond_dropout) {
        return Err(Error::invalid("cond_dropout must lie in [0, 1)"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if let Some(s) = corpus.samples.iter().find(|s| s.label >= net.num_classes) {
        return Err(Error::LabelOutOfRange {
            label: s.label,
            classes: net.num_classes,
        });
    }
    let mut rng = rng::seeded(seed);
    let mut opt = Adam::new(net.params.len(), cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let total = (cfg.epochs * corpus.len().div_ceil(cfg.batch_size)) as f64;
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let order = rng::permutation(&mut rng, corpus.len());
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.len();
            let x0 = corpus.batch(chunk);
            let mut eps = vec![0.0; rows * net.dim];
            fill_normal(&mut rng, &mut eps);
            let eps = Tensor::from_parts(vec![rows, net.dim], eps);
            let ts: Vec<usize> = (0..rows)
                .map(|_| rng.random_range(1..=sched.steps()))
                .collect();
            let conds: Vec<Option<usize>> = chunk
                .iter()
                .map(|&i| {
                    if rng.random::<f64>() < cfg.cond_dropout {
                        None
                    } else {
                        Some(corpus.samples[i].label)
                    }
                })
                .collect();
            let mut noisy = Vec::with_capacity(rows * net.dim);
            for (r, &t) in ts.iter().enumerate() {
                let xr = Tensor::from_parts(vec![1, net.dim], x0.row(r).to_vec());
                let er = Tensor::from_parts(vec![1, net.dim], eps.row(r).to_vec());
                noisy.extend(q_sample(&xr, t, &er, sched)?.into_data());
            }
            let noisy = Tensor::from_parts(vec![rows, net.dim], noisy);
            let (pred, cache) = net.forward(&noisy, &ts, &conds)?;
            epoch_loss += eps_loss(&pred, &eps)? * rows as f64;
            let scale = 2.0 / rows as f64;
            let d_out: Vec<f64> = pred
                .data()
                .iter()
                .zip(eps.data())
                .map(|(p, e)| scale * (p - e))
                .collect();
            let grads = net.param_grads(&cache, &d_out);
            if cfg.cosine_decay {
                opt.lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            }
            step += 1;
            opt.step(&mut net.params, &grads)?;
        }
        curve.push(epoch_loss / corpus.len() as f64);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_sched() -> NoiseSchedule {
        NoiseSchedule::linear(10, 1e-3, 0.02, 0.0).unwrap()
    }

    fn tiny_net(seed: u64) -> EpsNet {
        EpsNet::new(
            5,
            3,
            &EpsNetConfig {
                hidden: 7,
                time_dim: 4,
            },
            &tiny_sched(),
            &mut seeded(seed),
        )
        .unwrap()
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let net = tiny_net(1);
        let mut rng = seeded(2);
        let mut x = vec![0.0; 3 * 5];
        fill_normal(&mut rng, &mut x);
        let x = Tensor::new(vec![3, 5], x).unwrap();
        let ts = [3, 10, 1];
        let ys = [Some(0), None, Some(2)];
        let mut w = vec![0.0; 15];
        fill_normal(&mut rng, &mut w);
        let (_, cache) = net.forward(&x, &ts, &ys).unwrap();
        let g = net.param_grads(&cache, &w);
        let loss = |n: &EpsNet| -> f64 {
            let out = n.predict(&x, &ts, &ys).unwrap();
            out.data().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let mut checked = 0;
        for (i, &gi) in g.iter().enumerate() {
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let err = (num - gi).abs() / num.abs().max(gi.abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: numeric {num} vs analytic {gi}");
            checked += 1;
        }
        assert_eq!(checked, net.params.len());
    }

    #[test]
    fn perfect_and_zero_predictors() {
        let mut rng = seeded(3);
        let (rows, dim) = (4000, 16);
        let mut e = vec![0.0; rows * dim];
        fill_normal(&mut rng, &mut e);
        let eps = Tensor::new(vec![rows, dim], e).unwrap();
        assert_eq!(eps_loss(&eps, &eps).unwrap(), 0.0);
        let zero = eps_loss(&Tensor::zeros(vec![rows, dim]), &eps).unwrap();
        assert!((zero - dim as f64).abs() / (dim as f64) < 0.02, "{zero}");
    }

    #[test]
    fn rejects_unknown_class() {
        let net = tiny_net(4);
        let x = Tensor::zeros(vec![1, 5]);
        assert!(matches!(
            net.predict(&x, &[1], &[Some(3)]),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert!(net.predict(&x, &[1], &[None]).is_ok());
    }

    #[test]
    fn output_shape_matches_input() {
        let net = tiny_net(5);
        let x = Tensor::zeros(vec![6, 5]);
        assert_eq!(
            net.predict_uniform(&x, 2, Some(1)).unwrap().shape(),
            &[6, 5]
        );
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut net = tiny_net(6);
        let sched = NoiseSchedule::linear(10, 1e-3, 0.02, 0.0).unwrap();
        let ds = Dataset::new(5, 3);
        assert!(matches!(
            train_epsnet(&mut net, &ds, &sched, &EpsTrainConfig::default(), 0),
            Err(Error::Empty(_))
        ));
    }
}
