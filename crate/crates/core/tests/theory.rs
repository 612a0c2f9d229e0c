//! KL utilities and exhaustive finite-world checks of the client-conditioned bound.

use flmg::theory::{
    conditionalize, kl, random_world, theorem1_check, verify_theory, DiscreteWorld,
};
use flmg::Error;
use proptest::prelude::*;

#[test]
fn kl_hand_values() {
    let half = [0.5, 0.5];
    let quarter = [0.25, 0.75];
    let forward = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl(&half, &quarter).unwrap() - forward).abs() < 1e-15);
    assert!((forward - 0.1438).abs() < 1e-4);
    let backward = kl(&quarter, &half).unwrap();
    assert!((backward - 0.1308).abs() < 1e-4);
    assert!((forward - backward).abs() > 0.01);
    assert_eq!(kl(&half, &half).unwrap(), 0.0);
    assert_eq!(kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    assert!(matches!(
        kl(&[0.5, 0.5], &[1.0, 0.0]),
        Err(Error::InfiniteDivergence(_))
    ));
}

#[test]
fn conditionalize_special_cases() {
    let p = vec![0.1, 0.2, 0.3, 0.4];
    let w = DiscreteWorld::new(p.clone(), p.clone(), vec![0.7; 4]).unwrap();
    let (cond, z) = conditionalize(&w).unwrap();
    assert!((z - 0.7).abs() < 1e-15);
    for (a, b) in cond.iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
    // idempotent under a constant likelihood
    let again = DiscreteWorld::new(cond.clone(), p.clone(), vec![0.7; 4]).unwrap();
    assert_eq!(conditionalize(&again).unwrap().0, cond);

    let w = DiscreteWorld::new(
        p.clone(),
        vec![0.0, 0.5, 0.0, 0.5],
        vec![0.0, 1.0, 0.0, 1.0],
    )
    .unwrap();
    let (cond, z) = conditionalize(&w).unwrap();
    assert!((z - 0.6).abs() < 1e-15);
    assert!((cond[1] - 1.0 / 3.0).abs() < 1e-15 && (cond[3] - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!((cond[0], cond[2]), (0.0, 0.0));

    let dead = DiscreteWorld::new(p.clone(), p, vec![0.0; 4]).unwrap();
    assert!(matches!(conditionalize(&dead), Err(Error::ZeroEvidence)));
}

#[test]
fn degenerate_world_gives_zero_on_both_sides() {
    let p = vec![0.25; 4];
    let r = theorem1_check(&DiscreteWorld::new(p.clone(), p, vec![0.3; 4]).unwrap()).unwrap();
    assert!(r.lhs.abs() < 1e-15 && r.rhs.abs() < 1e-12 && r.holds);
}

#[test]
fn indicator_likelihood_on_client_support() {
    let w = DiscreteWorld::new(
        vec![0.1, 0.2, 0.3, 0.4],
        vec![0.0, 0.4, 0.0, 0.6],
        vec![0.0, 1.0, 0.0, 1.0],
    )
    .unwrap();
    let r = theorem1_check(&w).unwrap();
    assert!(r.lhs.is_finite() && r.rhs.is_finite() && r.holds);
    assert!(r.lambda_printed.is_none());
}

#[test]
fn thousand_random_worlds_have_no_counterexample() {
    let report = verify_theory(1000, 64, 0).unwrap();
    assert_eq!(report.worlds.len(), 1000);
    assert_eq!(report.counterexamples, 0);
    assert!(report.worlds.iter().all(|w| w.size <= 64 && w.holds));
    // the bound is an identity for this λ, so the margin vanishes up to rounding
    assert!(report.worlds.iter().all(|w| w.margin.abs() < 1e-9));
}

#[test]
fn support_violation_is_rejected() {
    let r = DiscreteWorld::new(vec![1.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]);
    assert!(matches!(r, Err(Error::InfiniteDivergence(_))));
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_vanishes_only_on_equality(seed in 0u64..10_000) {
        let mut rng = flmg::rng::seeded(seed);
        let w = random_world(&mut rng, 32);
        let d = kl(&w.p_client, &w.p_model).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(kl(&w.p_model, &w.p_model).unwrap(), 0.0);
        let differs = w.p_client.iter().zip(&w.p_model).any(|(a, b)| (a - b).abs() > 1e-12);
        prop_assert_eq!(d > 1e-12, differs);
        let (cond, _) = conditionalize(&w).unwrap();
        prop_assert!((cond.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
