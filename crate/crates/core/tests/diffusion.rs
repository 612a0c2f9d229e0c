//! Schedule algebra, forward/reverse identities, noise-net training and
//! sampling on random schedules and small corpora.

use flmg::data::{Dataset, Sample};
use flmg::diffusion::{
    ddim_step, ddim_step_between, eps_loss, predict_x0, q_sample, sample, train_epsnet, EpsNet,
    EpsNetConfig, EpsTrainConfig, NoiseSchedule,
};
use flmg::nn::Tensor;
use flmg::rng::seeded;
use rand::Rng;

mod common;
use common::{randn, random_schedule};

#[test]
fn twenty_random_schedules_are_consistent() {
    let mut rng = seeded(200);
    for _ in 0..20 {
        let s = random_schedule(&mut rng);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps() {
            let (ab, prev) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            assert!(ab < prev && ab > 0.0 && ab <= 1.0);
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            assert!(s.sigma(t) >= 0.0);
            assert!(1.0 - prev - s.sigma(t).powi(2) >= -1e-15, "t={t}");
        }
        for (t, tp) in s.sampling_pairs() {
            assert!(1.0 - s.alpha_bar(tp) - s.sigma_between(t, tp).powi(2) >= -1e-15);
        }
        let x0 = randn(&mut rng, vec![3, 7]);
        let eps = randn(&mut rng, vec![3, 7]);
        assert!(s.alpha_bar(s.steps()) > 1e-7);
        for t in [1, s.steps() / 2 + 1, s.steps()] {
            let st = q_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&st, &eps, t, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn deterministic_step_stays_on_the_clean_sample() {
    // σ = 0 and an ε consistent with x0: predict_x0 at t − 1 recovers x0
    let mut rng = seeded(201);
    for _ in 0..20 {
        let s = random_schedule(&mut rng);
        let x0 = randn(&mut rng, vec![2, 5]);
        let eps = randn(&mut rng, vec![2, 5]);
        let t = rng.random_range(2..=s.steps());
        let st = q_sample(&x0, t, &eps, &s).unwrap();
        let zero = Tensor::zeros(vec![2, 5]);
        let prev = ddim_step_between(&st, &eps, t, t - 1, 0.0, &s, &zero).unwrap();
        let back = predict_x0(&prev, &eps, t - 1, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn closed_forms() {
    let b = 0.03;
    let s = NoiseSchedule::linear(40, b, b, 0.0).unwrap();
    for t in 0..=40 {
        assert!((s.alpha_bar(t) - (1.0 - b).powi(t as i32)).abs() < 1e-14);
        if t > 0 {
            assert_eq!(s.sigma(t), 0.0);
        }
    }
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 0.0).unwrap();
    let direct: f64 = (0..1000)
        .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
        .product();
    assert!((s.alpha_bar(1000) / direct - 1.0).abs() < 1e-9);
    assert!(
        (s.alpha_bar(1000) / 4.0e-5 - 1.0).abs() < 0.05,
        "{}",
        s.alpha_bar(1000)
    );
    assert!(NoiseSchedule::linear(10, 0.0, 0.0, 0.0).is_err());
    assert!(NoiseSchedule::linear(10, 0.2, 0.1, 0.0).is_err());
}

#[test]
fn eq8_hand_value_and_boundary() {
    let s_t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let e = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    // a schedule whose first step has ᾱ = 0.64
    let s = NoiseSchedule::from_betas(vec![0.36, 0.5], 0.0).unwrap();
    assert!((predict_x0(&s_t, &e, 1, &s).unwrap().data()[0] - 0.875).abs() < 1e-12);
    let first = ddim_step(&s_t, &e, 1, &s, &Tensor::zeros(vec![1, 1])).unwrap();
    assert_eq!(first.data(), predict_x0(&s_t, &e, 1, &s).unwrap().data());
}

#[test]
fn forward_noising_variance_monte_carlo() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.05, 0.0).unwrap();
    let mut rng = seeded(202);
    let n = 100_000;
    let x0 = randn(&mut rng, vec![n, 1]).scaled(0.7);
    let eps = randn(&mut rng, vec![n, 1]);
    for t in [10, 50, 100] {
        let st = q_sample(&x0, t, &eps, &s).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        let ab = s.alpha_bar(t);
        let expected = ab * var(x0.data()) + (1.0 - ab);
        assert!((var(st.data()) / expected - 1.0).abs() < 0.02);
    }
}

#[test]
fn zero_prediction_costs_the_dimension() {
    let mut rng = seeded(203);
    let d = 16;
    let eps = randn(&mut rng, vec![20_000, d]);
    let loss = eps_loss(&Tensor::zeros(vec![20_000, d]), &eps).unwrap();
    assert!((loss / d as f64 - 1.0).abs() < 0.02, "{loss}");
    assert_eq!(eps_loss(&eps, &eps).unwrap(), 0.0);
}

/// Two classes in 16 dimensions with class-specific means.
fn toy_corpus(n_per_class: usize, seed: u64) -> Dataset {
    let mut rng = seeded(seed);
    let mut d = Dataset::new(16, 2);
    for class in 0..2 {
        for _ in 0..n_per_class {
            let x: Vec<f64> = (0..16)
                .map(|j| {
                    let m = if (j % 2 == 0) == (class == 0) {
                        0.6
                    } else {
                        -0.2
                    };
                    m + 0.2 * flmg::rng::standard_normal(&mut rng)
                })
                .collect();
            d.push(Sample {
                x,
                label: class,
                context: 0,
            })
            .unwrap();
        }
    }
    d
}

fn small_net(sched: &NoiseSchedule) -> EpsNet {
    let cfg = EpsNetConfig {
        hidden: 64,
        time_dim: 16,
    };
    EpsNet::new(16, 2, &cfg, sched, &mut seeded(7)).unwrap()
}

fn trained(sched: &NoiseSchedule, epochs: usize, cond_dropout: f64) -> (EpsNet, Vec<f64>) {
    let corpus = toy_corpus(256, 204);
    let mut net = small_net(sched);
    let cfg = EpsTrainConfig {
        epochs,
        lr: 2e-3,
        batch_size: 64,
        cond_dropout,
        cosine_decay: true,
    };
    let curve = train_epsnet(&mut net, &corpus, sched, &cfg, 5).unwrap();
    (net, curve)
}

fn sched() -> NoiseSchedule {
    NoiseSchedule::linear(100, 5e-4, 0.15, 0.0)
        .unwrap()
        .with_sampling_steps(25)
        .unwrap()
}

#[test]
fn training_halves_the_loss_and_trends_down() {
    let (_, curve) = trained(&sched(), 200, 0.1);
    assert_eq!(curve.len(), 200);
    assert!(
        curve[199] < 0.5 * curve[0],
        "{} vs {}",
        curve[199],
        curve[0]
    );
    let window = |i: usize| curve[i..i + 5].iter().sum::<f64>() / 5.0;
    let late = window(195);
    assert!(late <= window(0) && late <= window(100));
}

#[test]
fn sampling_is_seeded_and_matches_the_corpus_mean() {
    let s = sched();
    // half the labels dropped so the unconditional branch is well fit
    let (net, _) = trained(&s, 120, 0.5);
    let a = sample(&net, &s, Some(0), 512, 9).unwrap();
    let b = sample(&net, &s, Some(0), 512, 9).unwrap();
    assert_eq!(a.data(), b.data());
    assert_eq!(sample(&net, &s, Some(0), 0, 9).unwrap().len(), 0);

    // the corpus' global mean is 0.2 per coordinate (half the coordinates at 0.6, half at −0.2)
    let u = sample(&net, &s, None, 512, 10).unwrap();
    let row_means: Vec<f64> = (0..512)
        .map(|r| u.row(r).iter().sum::<f64>() / 16.0)
        .collect();
    let m = row_means.iter().sum::<f64>() / 512.0;
    let sd = (row_means.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 511.0).sqrt();
    let se = sd / 512f64.sqrt();
    assert!((m - 0.2).abs() < 3.0 * se, "mean {m}, se {se}");

    // class 0 samples lie nearer the class-0 centroid than the class-1 centroid
    let c0: Vec<f64> = (0..16)
        .map(|j| if j % 2 == 0 { 0.6 } else { -0.2 })
        .collect();
    let c1: Vec<f64> = (0..16)
        .map(|j| if j % 2 == 0 { -0.2 } else { 0.6 })
        .collect();
    let dist = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let closer = (0..512)
        .filter(|&r| dist(a.row(r), &c0) < dist(a.row(r), &c1))
        .count();
    assert!(closer as f64 >= 0.8 * 512.0, "{closer}");
}

#[test]
fn sampling_rejects_a_foreign_schedule() {
    let s = sched();
    let net = small_net(&s);
    let other = NoiseSchedule::linear(100, 1e-4, 0.02, 0.0).unwrap();
    assert!(sample(&net, &other, None, 4, 0).is_err());
}
