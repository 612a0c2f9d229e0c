//! Analytic gradients against central finite differences on seeded random
//! models and batches.

use flmg::diffusion::{predict_x0, NoiseSchedule};
use flmg::guidance::{bn_loss, guidance_gradient, guidance_loss, GuidanceConfig};
use flmg::nn::{
    distillation_kl, softmax, Architecture, BnStats, ClassifierModel, KlDirection, Mode, Tensor,
};
use flmg::rng::seeded;
use rand::Rng;

mod common;
use common::{check_model, fd_input, randn, random_model};

#[test]
fn batch_norm_models_match_finite_differences() {
    let mut rng = seeded(100);
    for _ in 0..50 {
        let (model, d) = random_model(&mut rng, true);
        check_model(&model, d, &mut rng, Mode::Train, 1e-4);
        check_model(&model, d, &mut rng, Mode::Eval, 1e-4);
    }
}

#[test]
fn plain_layers_match_finite_differences() {
    let mut rng = seeded(101);
    for _ in 0..50 {
        let (model, d) = random_model(&mut rng, false);
        check_model(&model, d, &mut rng, Mode::Eval, 1e-5);
    }
}

#[test]
fn bn_loss_gradient_matches_finite_differences() {
    let mut rng = seeded(102);
    for _ in 0..50 {
        let (model, d) = random_model(&mut rng, true);
        let b = rng.random_range(2..7);
        let x = randn(&mut rng, vec![b, d]);
        let (_, g) = bn_loss(&x, &model).unwrap();
        let worst = fd_input(|x| bn_loss(x, &model).unwrap().0, &x, &g);
        assert!(worst < 1e-4, "{worst:e}");
    }
}

#[test]
fn guidance_composition_matches_finite_differences() {
    // d/ds_t of L(x̂₀(s_t)) with the raw noise estimate held fixed
    let mut rng = seeded(103);
    let sched = NoiseSchedule::linear(50, 1e-3, 0.05, 0.0).unwrap();
    for i in 0..50 {
        let (model, d) = random_model(&mut rng, true);
        let b = rng.random_range(2..7);
        let c = model.num_classes();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let s_t = randn(&mut rng, vec![b, d]);
        let eps = randn(&mut rng, vec![b, d]);
        let t = rng.random_range(1..=50);
        let cfg = GuidanceConfig {
            lambda_bn: [0.0, 0.5, 1.0][i % 3],
            ..Default::default()
        };
        let (_, g) = guidance_gradient(&s_t, &eps, t, &labels, &model, &sched, &cfg).unwrap();
        let f = |s: &Tensor| {
            let x0 = predict_x0(s, &eps, t, &sched).unwrap();
            guidance_loss(&x0, &labels, &model, &cfg).unwrap().0
        };
        let worst = fd_input(f, &s_t, &g);
        assert!(worst < 1e-4, "world {i}: {worst:e}");
    }
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let mut rng = seeded(104);
    for i in 0..50 {
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..6));
        let logits = randn(&mut rng, vec![b, c]);
        let teacher: Vec<Vec<f64>> = (0..b)
            .map(|_| softmax(randn(&mut rng, vec![1, c]).data(), 1.0))
            .collect();
        let tau = 0.5 + rng.random::<f64>();
        let dir = if i % 2 == 0 {
            KlDirection::StudentTeacher
        } else {
            KlDirection::TeacherStudent
        };
        let (_, g) = distillation_kl(&logits, &teacher, tau, dir).unwrap();
        let worst = fd_input(
            |z| distillation_kl(z, &teacher, tau, dir).unwrap().0,
            &logits,
            &g,
        );
        assert!(worst < 1e-5, "{worst:e}");
    }
}

#[test]
fn running_mean_tracks_layer_input_mean() {
    // input feeds the first BN layer through a fixed linear map, so its mean is W·m + b
    let mut rng = seeded(105);
    let arch = Architecture::mlp(3, &[4], 2);
    let mut model = ClassifierModel::new(&arch, &mut rng).unwrap();
    let m = [0.7, -1.2, 0.4];
    // an EMA with momentum 0.1 over batches of 2048 averages roughly 4·10⁴ samples
    for _ in 0..200 {
        let mut x = randn(&mut rng, vec![2048, 3]);
        for r in 0..2048 {
            for (v, mu) in x.row_mut(r).iter_mut().zip(m) {
                *v += mu;
            }
        }
        model.forward(&x, Mode::Train).unwrap();
    }
    let p = model.params();
    for j in 0..4 {
        let expected: f64 = (0..3).map(|i| p[i * 4 + j] * m[i]).sum::<f64>() + p[12 + j];
        let got = model.extract_bn_stats()[0].mean[j];
        assert!(
            (got - expected).abs() < 0.02 * expected.abs().max(0.25),
            "feature {j}: {got} vs {expected}"
        );
    }
    let fresh = ClassifierModel::new(&arch, &mut rng).unwrap();
    assert!(fresh
        .extract_bn_stats()
        .iter()
        .all(|s: &BnStats| s.mean.iter().all(|&v| v == 0.0) && s.var.iter().all(|&v| v == 1.0)));
}
