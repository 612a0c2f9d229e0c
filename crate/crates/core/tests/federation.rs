//! Client training, synthetic-set construction, aggregation, baselines and
//! cost accounting, including the exact reductions between methods.

use flmg::data::{
    make_corpus, partition_feature_skew, partition_label_skew, Dataset, Sample, ToyCorpusConfig,
};
use flmg::diffusion::{sample, EpsNet, EpsNetConfig, NoiseSchedule};
use flmg::federation::{
    accuracy, aggregate, aggregate_finetune, build_synthetic, ceiling_baseline, evaluate_global,
    fedavg_baseline, fedlmg_ledger, ledger_report, local_train, mean, prompts_only_baseline,
    AggregationStrategy, ClientUpdate, FedAvgConfig, StrategyKind, TrainConfig, Weighting,
};
use flmg::guidance::{generate_guided, GuidanceConfig};
use flmg::io::checkpoint::{checkpoint_size, encode_checkpoint};
use flmg::nn::{Architecture, ClassifierModel};
use flmg::rng::{seeded, stream};
use flmg::Error;

fn corpus() -> Dataset {
    make_corpus(&ToyCorpusConfig {
        image_side: 6,
        num_classes: 4,
        num_contexts: 4,
        samples_per_cell: 30,
        noise: 0.15,
        seed: 11,
    })
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 0.05,
        momentum: 0.9,
        batch_size: 16,
    }
}

fn same(a: &ClassifierModel, b: &ClassifierModel) -> bool {
    let bits = |m: &ClassifierModel| {
        let mut v: Vec<u64> = m.params().iter().map(|x| x.to_bits()).collect();
        for s in m.bn_stats() {
            v.extend(s.mean.iter().chain(&s.var).map(|x| x.to_bits()));
        }
        v
    };
    a.layers() == b.layers() && bits(a) == bits(b)
}

fn clients(k: usize, arch: &Architecture) -> (Vec<Dataset>, Vec<Dataset>, Vec<ClientUpdate>) {
    let parts = partition_feature_skew(&corpus(), k, 2).unwrap();
    let updates = parts
        .iter()
        .enumerate()
        .map(|(i, p)| local_train(i, &p.train, arch, &train_cfg(5), 30 + i as u64).unwrap())
        .collect();
    let (train, test) = parts.into_iter().map(|p| (p.train, p.test)).unzip();
    (train, test, updates)
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(40, 1e-3, 0.2, 0.0)
        .unwrap()
        .with_sampling_steps(8)
        .unwrap()
}

fn net(sched: &NoiseSchedule) -> EpsNet {
    EpsNet::new(
        36,
        4,
        &EpsNetConfig {
            hidden: 32,
            time_dim: 8,
        },
        sched,
        &mut seeded(4),
    )
    .unwrap()
}

#[test]
fn ledgers_count_exactly() {
    let arch = Architecture::mlp(36, &[16], 4);
    let (train, _, updates) = clients(3, &arch);
    let l = fedlmg_ledger(&updates).unwrap();
    let r = ledger_report(&l);
    let per = updates[0].upload_params() as u64;
    assert_eq!(per, (36 * 16 + 16 + 2 * 16 + 16 * 4 + 4 + 2 * 16) as u64);
    assert_eq!(r.upload_params, 3 * per);
    assert_eq!(r.download_params, 0);
    assert_eq!(r.total_params, r.upload_params);
    assert_eq!(r.rounds, 1);
    for (u, c) in updates.iter().zip(&l.clients) {
        assert_eq!((c.uploads, c.downloads), (1, 0));
        let bytes = encode_checkpoint(&u.model, &u.meta()).unwrap().len() as u64;
        assert_eq!(c.upload_bytes, bytes);
        assert_eq!(bytes, checkpoint_size(&u.model) as u64);
        // forward + backward ≈ 3 forward MACs per processed sample
        assert_eq!(
            c.train_flops,
            3 * u.model.forward_macs() * (5 * u.train_size) as u64
        );
    }

    let rounds = 4;
    let refs: Vec<&Dataset> = train.iter().collect();
    let fa = FedAvgConfig {
        rounds,
        local_epochs: 1,
        weighting: Weighting::BySize,
        train: train_cfg(1),
    };
    let (_, fl) =
        fedavg_baseline(&refs, &[arch.clone(), arch.clone(), arch.clone()], &fa, 8).unwrap();
    let fr = ledger_report(&fl);
    assert_eq!(fr.rounds, rounds as u64);
    assert!(fl
        .clients
        .iter()
        .all(|c| c.uploads == rounds as u64 && c.downloads == rounds as u64));
    assert_eq!(fr.upload_params, rounds as u64 * r.upload_params);
    assert_eq!(fr.download_params, fr.upload_params);
    assert_eq!(fr.upload_bytes, rounds as u64 * r.upload_bytes);
    for (c, u) in fl.clients.iter().zip(&updates) {
        assert_eq!(
            c.train_flops,
            3 * u.model.forward_macs() * (rounds * u.train_size) as u64
        );
    }
}

#[test]
fn evaluation_is_the_unweighted_client_mean() {
    let row = [47.60, 55.20, 61.54, 61.83, 67.07, 59.90];
    assert_eq!(format!("{:.2}", mean(&row).unwrap()), "58.86");
    assert!(mean(&[]).is_err());

    let arch = Architecture::mlp(36, &[8], 4);
    let mut constant = ClassifierModel::new(&arch, &mut seeded(0)).unwrap();
    constant.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let (_, test, _) = clients(2, &arch);
    let small = test[0].filter(|s| s.label < 2);
    let r = evaluate_global(&constant, &[&test[0], &test[1], &small]).unwrap();
    assert_eq!(r.per_client, vec![0.25, 0.25, 0.5]);
    assert!((r.average - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn local_training_fits_separable_data_and_zero_epochs_is_the_init() {
    let mut rng = seeded(12);
    let mut d = Dataset::new(8, 2);
    for i in 0..200 {
        let label = i % 2;
        let mut x: Vec<f64> = (0..8)
            .map(|_| 0.3 * flmg::rng::standard_normal(&mut rng))
            .collect();
        x[0] += if label == 0 { -2.0 } else { 2.0 };
        d.push(Sample {
            x,
            label,
            context: 0,
        })
        .unwrap();
    }
    let arch = Architecture::mlp(8, &[8], 2);
    let u = local_train(0, &d, &arch, &train_cfg(10), 3).unwrap();
    assert!(accuracy(&u.model, &d).unwrap() >= 0.99);

    let init = local_train(0, &d, &arch, &train_cfg(0), 3).unwrap();
    let fresh = ClassifierModel::new(&arch, &mut stream(3, 0)).unwrap();
    assert!(same(&init.model, &fresh));
    assert_eq!(init.train_flops, 0);
    assert!(matches!(
        local_train(0, &Dataset::new(8, 2), &arch, &train_cfg(1), 3),
        Err(Error::Empty(_))
    ));
}

#[test]
fn synthetic_set_follows_label_sets_and_counts() {
    let sched = schedule();
    let net = net(&sched);
    let base = corpus().filter(|s| s.context == 0);
    let parts = partition_label_skew(&base, 3, 0.1, 5).unwrap();
    let arch = Architecture::mlp(36, &[8], 4);
    let updates: Vec<ClientUpdate> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| local_train(i, &p.train, &arch, &train_cfg(2), i as u64).unwrap())
        .collect();
    let cfg = GuidanceConfig::default();
    let own = build_synthetic(&updates, &net, None, &sched, &cfg, 9).unwrap();
    let fixed = build_synthetic(&updates, &net, Some(3), &sched, &cfg, 9).unwrap();
    for u in &updates {
        for y in 0..4 {
            let n_own = own
                .counts()
                .get(&(Some(u.client_id), y))
                .copied()
                .unwrap_or(0);
            let n_fixed = fixed
                .counts()
                .get(&(Some(u.client_id), y))
                .copied()
                .unwrap_or(0);
            assert_eq!(n_own, u.class_counts[y]);
            assert_eq!(n_fixed, if u.class_counts[y] > 0 { 3 } else { 0 });
        }
    }
    assert_eq!(
        own.len(),
        updates.iter().map(|u| u.train_size).sum::<usize>()
    );
    assert_eq!(
        build_synthetic(&updates, &net, Some(3), &sched, &cfg, 9).unwrap(),
        fixed
    );
    assert!(build_synthetic(&updates, &net, Some(0), &sched, &cfg, 9).is_err());
    assert!(build_synthetic(&[], &net, Some(3), &sched, &cfg, 9).is_err());
}

#[test]
fn heterogeneous_clients_distill_but_cannot_average() {
    let sched = schedule();
    let net = net(&sched);
    let parts = partition_feature_skew(&corpus(), 2, 2).unwrap();
    let archs = [
        Architecture::mlp(36, &[16], 4),
        Architecture::mlp(36, &[8, 8], 4),
    ];
    let updates: Vec<ClientUpdate> = parts
        .iter()
        .zip(&archs)
        .enumerate()
        .map(|(i, (p, a))| local_train(i, &p.train, a, &train_cfg(2), i as u64).unwrap())
        .collect();
    let synth = build_synthetic(
        &updates,
        &net,
        Some(4),
        &sched,
        &GuidanceConfig::default(),
        1,
    )
    .unwrap();
    let teachers: Vec<&ClassifierModel> = updates.iter().map(|u| &u.model).collect();
    let server = Architecture::mlp(36, &[12], 4);
    for kind in [StrategyKind::MultiTeacher, StrategyKind::SpecificTeacher] {
        let m = aggregate(
            &synth,
            &server,
            &teachers,
            &AggregationStrategy::new(kind, train_cfg(2)),
            3,
        )
        .unwrap();
        assert_eq!(m.layers(), server.layers().as_slice());
    }
    let refs: Vec<&Dataset> = parts.iter().map(|p| &p.train).collect();
    let fa = FedAvgConfig {
        rounds: 1,
        local_epochs: 1,
        weighting: Weighting::BySize,
        train: train_cfg(1),
    };
    assert!(matches!(
        fedavg_baseline(&refs, &archs, &fa, 0),
        Err(Error::Heterogeneous(_))
    ));
}

#[test]
fn distillation_without_weight_is_fine_tuning() {
    let sched = schedule();
    let net = net(&sched);
    let arch = Architecture::mlp(36, &[16], 4);
    let (_, _, updates) = clients(3, &arch);
    let synth = build_synthetic(
        &updates,
        &net,
        Some(5),
        &sched,
        &GuidanceConfig::default(),
        2,
    )
    .unwrap();
    let teachers: Vec<&ClassifierModel> = updates.iter().map(|u| &u.model).collect();
    let ft = aggregate_finetune(&synth, &arch, &train_cfg(3), 6).unwrap();
    for kind in [StrategyKind::MultiTeacher, StrategyKind::SpecificTeacher] {
        let mut s = AggregationStrategy::new(kind, train_cfg(3));
        s.lambda_distill = 0.0;
        assert!(
            same(&aggregate(&synth, &arch, &teachers, &s, 6).unwrap(), &ft),
            "{kind:?}"
        );
        s.lambda_distill = 1.0;
        assert!(!same(
            &aggregate(&synth, &arch, &teachers, &s, 6).unwrap(),
            &ft
        ));
    }
}

#[test]
fn one_client_reductions() {
    let sched = schedule();
    let net = net(&sched);
    let arch = Architecture::mlp(36, &[16], 4);
    let (train, _, updates) = clients(1, &arch);
    let synth = build_synthetic(
        &updates,
        &net,
        Some(6),
        &sched,
        &GuidanceConfig::default(),
        2,
    )
    .unwrap();
    let teachers = [&updates[0].model];
    let md = aggregate(
        &synth,
        &arch,
        &teachers,
        &AggregationStrategy::new(StrategyKind::MultiTeacher, train_cfg(3)),
        6,
    )
    .unwrap();
    let sd = aggregate(
        &synth,
        &arch,
        &teachers,
        &AggregationStrategy::new(StrategyKind::SpecificTeacher, train_cfg(3)),
        6,
    )
    .unwrap();
    assert!(same(&md, &sd));

    // one FedAvg client over R one-epoch rounds is R epochs of local SGD
    let fa = FedAvgConfig {
        rounds: 4,
        local_epochs: 1,
        weighting: Weighting::Uniform,
        train: train_cfg(1),
    };
    let (global, _) = fedavg_baseline(&[&train[0]], std::slice::from_ref(&arch), &fa, 21).unwrap();
    assert!(same(
        &global,
        &local_train(0, &train[0], &arch, &train_cfg(4), 21)
            .unwrap()
            .model
    ));

    let (ceiling, ledger) = ceiling_baseline(&[&train[0]], &arch, &train_cfg(3), 22).unwrap();
    assert!(same(
        &ceiling.model,
        &local_train(0, &train[0], &arch, &train_cfg(3), 22)
            .unwrap()
            .model
    ));
    assert_eq!(
        ledger.clients[0].upload_params,
        (train[0].len() * 36) as u64
    );
}

#[test]
fn guidance_off_is_plain_class_conditional_sampling() {
    let sched = schedule();
    let net = net(&sched);
    let arch = Architecture::mlp(36, &[8], 4);
    let model = ClassifierModel::new(&arch, &mut seeded(1)).unwrap();
    let plain = sample(&net, &sched, Some(2), 70, 13).unwrap();
    for cfg in [
        GuidanceConfig {
            guide_scale: 0.0,
            ..Default::default()
        },
        GuidanceConfig {
            lambda_bn: 0.0,
            ce_weight: 0.0,
            ..Default::default()
        },
    ] {
        let recs = generate_guided(&net, &model, 0, 2, 70, &sched, &cfg, 13).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.x.as_slice(), plain.row(i));
        }
    }
    let guided = generate_guided(
        &net,
        &model,
        0,
        2,
        70,
        &sched,
        &GuidanceConfig::default(),
        13,
    )
    .unwrap();
    assert!(guided
        .iter()
        .enumerate()
        .any(|(i, r)| r.x.as_slice() != plain.row(i)));

    let (prompts, ledger) = prompts_only_baseline(&net, &[1, 3], 5, &sched, 40, 2).unwrap();
    assert_eq!(ledger_report(&ledger).total_params, 0);
    for (j, y) in [1usize, 3].into_iter().enumerate() {
        let expected = sample(
            &net,
            &sched,
            Some(y),
            5,
            flmg::rng::derive_seed(40, y as u64),
        )
        .unwrap();
        for i in 0..5 {
            let r = &prompts.records[j * 5 + i];
            assert_eq!((r.label, r.client), (y, None));
            assert_eq!(r.x.as_slice(), expected.row(i));
        }
    }
}
