//! Exact finite-world check of the KL bound on the client-conditioned
//! diffusion distribution.
//!
//! With `p_cond(x) = p_model(x)·lik(x) / Z`, expanding the definition gives
//! `KL(p_client ‖ p_cond) = KL(p_client ‖ p_model) + ln Z − E_client[ln lik]`,
//! so the bound holds with equality when λ is the divergence from the client
//! distribution to the model distribution. The opposite direction is also
//! reported; it is not a valid λ in general.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_WORLD_SIZE: usize = 10_000;
const SUM_TOL: f64 = 1e-12;
pub const HOLD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteWorld {
    pub p_model: Vec<f64>,
    pub p_client: Vec<f64>,
    /// Likelihood of the client model given each outcome, in `[0, 1]`.
    pub lik: Vec<f64>,
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid(format!(
            "{what} has a negative or non-finite mass"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL * p.len().max(1) as f64 {
        return Err(Error::invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteWorld {
    pub fn new(p_model: Vec<f64>, p_client: Vec<f64>, lik: Vec<f64>) -> Result<Self> {
        let w = Self {
            p_model,
            p_client,
            lik,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn size(&self) -> usize {
        self.p_model.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p_model.len();
        if n == 0 || n > MAX_WORLD_SIZE {
            return Err(Error::invalid(format!(
                "world size {n} outside 1..={MAX_WORLD_SIZE}"
            )));
        }
        if self.p_client.len() != n || self.lik.len() != n {
            return Err(Error::shape(
                "distributions and likelihood differ in length",
            ));
        }
        check_distribution(&self.p_model, "p_model")?;
        check_distribution(&self.p_client, "p_client")?;
        if self.lik.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("likelihood values must lie in [0, 1]"));
        }
        if self
            .p_client
            .iter()
            .zip(&self.p_model)
            .any(|(c, m)| *c > 0.0 && *m == 0.0)
        {
            return Err(Error::InfiniteDivergence(
                "client support exceeds model support".into(),
            ));
        }
        Ok(())
    }
}

/// `Σ p ln(p/q)` with `0·ln(0/q) = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("distributions differ in length"));
    }
    let mut s = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::InfiniteDivergence(format!(
                    "p has mass at {i} where q has none"
                )));
            }
            s += a * (a / b).ln();
        }
    }
    Ok(s.max(0.0))
}

/// Bayes update of the model distribution by the likelihood: returns
/// `p_model·lik / Z` and the evidence `Z`.
pub fn conditionalize(world: &DiscreteWorld) -> Result<(Vec<f64>, f64)> {
    let evidence: f64 = world
        .p_model
        .iter()
        .zip(&world.lik)
        .map(|(p, l)| p * l)
        .sum();
    if !(evidence > 0.0) {
        return Err(Error::ZeroEvidence);
    }
    let cond = world
        .p_model
        .iter()
        .zip(&world.lik)
        .map(|(p, l)| p * l / evidence)
        .collect();
    Ok((cond, evidence))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    /// `KL(p_client ‖ p_cond)`.
    pub lhs: f64,
    /// `lambda_used + ln Z − Σ p_client ln lik`.
    pub rhs: f64,
    /// `KL(p_client ‖ p_model)`.
    pub lambda_used: f64,
    pub holds: bool,
    pub margin: f64,
    /// `KL(p_model ‖ p_client)`; `None` when infinite.
    pub lambda_printed: Option<f64>,
    /// Whether the bound also holds with `lambda_printed` (`true` when it is infinite).
    pub holds_printed: bool,
}

pub fn theorem1_check(world: &DiscreteWorld) -> Result<Theorem1Report> {
    world.validate()?;
    let (cond, evidence) = conditionalize(world)?;
    let lhs = kl(&world.p_client, &cond)?;
    let lambda_used = kl(&world.p_client, &world.p_model)?;
    let mut cross = 0.0;
    for (&c, &l) in world.p_client.iter().zip(&world.lik) {
        if c > 0.0 {
            cross += c * l.ln();
        }
    }
    let rest = evidence.ln() - cross;
    let rhs = lambda_used + rest;
    let lambda_printed = match kl(&world.p_model, &world.p_client) {
        Ok(v) => Some(v),
        Err(Error::InfiniteDivergence(_)) => None,
        Err(e) => return Err(e),
    };
    let holds_printed = lambda_printed.is_none_or(|lp| lhs <= lp + rest + HOLD_TOL);
    Ok(Theorem1Report {
        lhs,
        rhs,
        lambda_used,
        holds: lhs <= rhs + HOLD_TOL,
        margin: rhs - lhs,
        lambda_printed,
        holds_printed,
    })
}

fn normalized(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// A random world of size `2..=max_size`. The model has full support; the
/// client lives on a random subset half the time; likelihoods lie in
/// `[0.01, 1]` on the client support and occasionally vanish elsewhere.
pub fn random_world<R: Rng + ?Sized>(rng: &mut R, max_size: usize) -> DiscreteWorld {
    let n = rng.random_range(2..=max_size.max(2));
    let p_model = normalized(
        (0..n)
            .map(|_| -rng.random::<f64>().max(1e-300).ln())
            .collect(),
    );
    let restrict = rng.random_bool(0.5);
    let mut support: Vec<bool> = (0..n).map(|_| !restrict || rng.random_bool(0.5)).collect();
    if !support.iter().any(|s| *s) {
        support[rng.random_range(0..n)] = true;
    }
    let p_client = normalized(
        (0..n)
            .map(|i| {
                if support[i] {
                    -rng.random::<f64>().max(1e-300).ln()
                } else {
                    0.0
                }
            })
            .collect(),
    );
    let lik = (0..n)
        .map(|i| {
            if !support[i] && rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.01..=1.0)
            }
        })
        .collect();
    DiscreteWorld {
        p_model,
        p_client,
        lik,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldResult {
    pub index: usize,
    pub size: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub holds: bool,
    pub lambda_printed: Option<f64>,
    pub holds_printed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub worlds: Vec<WorldResult>,
    pub counterexamples: usize,
    pub printed_direction_violations: usize,
}

/// Checks `count` seeded random worlds; world `i` uses stream `(seed, i)`.
pub fn verify_theory(count: usize, max_size: usize, seed: u64) -> Result<TheoryReport> {
    let mut worlds = Vec::with_capacity(count);
    for i in 0..count {
        let w = random_world(&mut rng::stream(seed, i as u64), max_size);
        let r = theorem1_check(&w)?;
        worlds.push(WorldResult {
            index: i,
            size: w.size(),
            lhs: r.lhs,
            rhs: r.rhs,
            margin: r.margin,
            holds: r.holds,
            lambda_printed: r.lambda_printed,
            holds_printed: r.holds_printed,
        });
    }
    Ok(TheoryReport {
        counterexamples: worlds.iter().filter(|w| !w.holds).count(),
        printed_direction_violations: worlds.iter().filter(|w| !w.holds_printed).count(),
        worlds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_values() {
        let a = kl(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((a - (0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())).abs() < 1e-15);
        assert!((a - 0.1438).abs() < 1e-4);
        let b = kl(&[0.25, 0.75], &[0.5, 0.5]).unwrap();
        assert!((b - 0.1308).abs() < 1e-4);
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn support_violation() {
        assert!(matches!(
            kl(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::InfiniteDivergence(_))
        ));
        assert_eq!(kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn constant_likelihood_leaves_model_unchanged() {
        let w = DiscreteWorld::new(vec![0.2, 0.3, 0.5], vec![0.2, 0.3, 0.5], vec![0.4; 3]).unwrap();
        let (c, z) = conditionalize(&w).unwrap();
        assert!((z - 0.4).abs() < 1e-15);
        for (a, b) in c.iter().zip(&w.p_model) {
            assert!((a - b).abs() < 1e-15);
        }
        let r = theorem1_check(&w).unwrap();
        assert!(r.lhs.abs() < 1e-15 && r.rhs.abs() < 1e-12 && r.holds);
    }

    #[test]
    fn zero_evidence() {
        let w = DiscreteWorld::new(vec![0.5, 0.5], vec![0.5, 0.5], vec![0.0, 0.0]).unwrap();
        assert!(matches!(conditionalize(&w), Err(Error::ZeroEvidence)));
    }

    #[test]
    fn bound_is_tight_on_random_worlds() {
        let rep = verify_theory(200, 64, 5).unwrap();
        assert_eq!(rep.counterexamples, 0);
        assert!(rep.worlds.iter().all(|w| w.margin.abs() < 1e-9));
    }
}
