use crate::error::{Error, Result};

/// One SGD update `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd over {} params with {} grads and {} velocity slots",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::invalid("learning rate must be non-negative"));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid("momentum must lie in [0, 1)"));
    }
    if lr == 0.0 {
        return Ok(());
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// SGD with momentum, holding its own velocity buffer.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        sgd_step(params, grads, &mut self.velocity, self.lr, self.momentum)
    }
}

/// Adam, used for the noise-prediction network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("adam buffer length differs from parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_is_identity() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[3.0, 4.0], &mut v, 0.0, 0.9).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn plain_step() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, 0.0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn quadratic_bowl_converges_geometrically() {
        let mut opt = Sgd::new(1, 0.1, 0.0);
        let mut p = vec![1.0];
        for _ in 0..100 {
            let g = vec![2.0 * p[0]];
            opt.step(&mut p, &g).unwrap();
        }
        let closed = 0.8f64.powi(100);
        assert!((p[0] - closed).abs() < 1e-15);
        assert!(p[0].abs() < 1e-4);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0; 2];
        assert!(sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(2, 0.05);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3));
    }
}
