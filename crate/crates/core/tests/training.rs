use slimsplit::autodiff::{Gradients, Graph};
use slimsplit::data::{gen_dataset, Dataset, Split, SyntheticDatasetSpec};
use slimsplit::optim::Sgd;
use slimsplit::slim::{BnMode, TensorRole, WidthMultiplier, WidthSet};
use slimsplit::tensor::{Shape, Tensor};
use slimsplit::train::{
    self, distill, distill_epoch, distill_loss_graph, evaluate, post_bn_recalibrate, teacher_taps, train_teacher, width_gradients,
    TrainConfig, TrainError,
};
use slimsplit::zoo::{build_student, build_teacher, BottleneckSpec, CompressorVariant, ConfigMode, SplitStudent, StudentOptions, TeacherNet};

fn w(s: &str) -> WidthMultiplier {
    s.parse().unwrap()
}

fn data(n: usize) -> Dataset {
    gen_dataset(&SyntheticDatasetSpec::with_sizes(n, 16), 1).unwrap()
}

fn student_for(teacher: &TeacherNet, variant: CompressorVariant, mode: ConfigMode) -> SplitStudent {
    build_student(teacher, BottleneckSpec::new(48, variant).unwrap(), WidthSet::default(), mode, StudentOptions::default()).unwrap()
}

fn tiny_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        halving_period: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn teacher_starts_at_ln2_and_improves() {
    let ds = data(64);
    let mut t = build_teacher(0);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::teacher() };
    let report = train_teacher(&mut t, &ds.train, &cfg).unwrap();
    // near-zero head weights give p = 0.5 for every cell
    assert!((report.initial_loss - std::f64::consts::LN_2).abs() < 0.02, "initial {}", report.initial_loss);
    assert!(report.epoch_losses[0] < report.initial_loss);
    assert!(report.epoch_losses[1] < report.epoch_losses[0]);
}

#[test]
fn teacher_divergence_is_reported_with_step() {
    let ds = data(32);
    let mut t = build_teacher(0);
    let cfg = TrainConfig {
        epochs: 1,
        lr0: 1e200,
        momentum: 0.0,
        ..TrainConfig::teacher()
    };
    match train_teacher(&mut t, &ds.train, &cfg) {
        Err(TrainError::Divergence { step, .. }) => assert!(step > 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn accumulated_gradients_are_sum_of_per_width_passes() {
    let ds = data(8);
    let teacher = build_teacher(2);
    let (x, _) = ds.train.batch(0, 4).unwrap();
    let taps = teacher_taps(&teacher, &x).unwrap();
    for mode in [ConfigMode::BandwidthOnly, ConfigMode::FullConfig] {
        let base = student_for(&teacher, CompressorVariant::SruCru, mode);
        let widths = [w("0.25"), w("0.66"), WidthMultiplier::FULL];

        // accumulated the way the trainer does it
        let mut s = base.clone();
        let mut acc = Gradients::default();
        for &a in &widths {
            acc.accumulate(&width_gradients(&mut s, &x, &taps, a, &[1.0, 1.0]).unwrap().1);
        }

        // oracle: one graph holding every width's loss, differentiated once
        let mut s = base.clone();
        let mut g = Graph::new();
        let xn = g.input(x.clone());
        let mut terms = Vec::new();
        for &a in &widths {
            let nodes = s.forward_graph(&mut g, xn, a, BnMode::Train).unwrap();
            let l = distill_loss_graph(&mut g, &[nodes.decompressed, nodes.decoded], &[&taps[0], &taps[1]], &[1.0, 1.0]).unwrap();
            terms.push((l, 1.0));
        }
        let total = g.weighted_sum(&terms).unwrap();
        let joint = g.backward(total).unwrap();

        let mut compared = 0;
        for (id, ga) in acc.params() {
            let gj = joint.param(id).unwrap();
            let scale = gj.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            for (a, b) in ga.iter().zip(gj) {
                assert!((a - b).abs() <= 1e-10 * scale, "param {id}: {a} vs {b}");
            }
            compared += 1;
        }
        assert_eq!(compared, joint.params().count());
    }
}

#[test]
fn epoch_samples_sandwich_and_keeps_teacher_and_decoder_frozen() {
    let ds = data(24);
    let teacher = build_teacher(4);
    let t_hash = teacher.weight_hash();
    let mut s = student_for(&teacher, CompressorVariant::LastLayerPair, ConfigMode::FullConfig);
    let d_hash = s.decoder_hash();
    let cfg = tiny_cfg(2);
    let mut opt = Sgd::new(cfg.momentum).unwrap();
    for epoch in 0..2 {
        let stats = distill_epoch(&mut s, &teacher, &ds.train, &cfg, epoch, &mut opt).unwrap();
        assert_eq!(stats.samples.len(), 6);
        assert_eq!(stats.lr, cfg.lr_at(epoch));
        for sample in &stats.samples {
            assert_eq!(sample.len(), cfg.n_sandwich);
            assert_eq!(sample[0], cfg.width_set.min());
            assert_eq!(*sample.last().unwrap(), cfg.width_set.max());
        }
        assert!(stats.width_loss.iter().all(|(_, l)| l.is_finite()));
    }
    assert_eq!(teacher.weight_hash(), t_hash);
    assert_eq!(s.decoder_hash(), d_hash);
    assert!(s.decoder_matches(&teacher));
}

#[test]
fn distillation_is_reproducible() {
    let ds = data(16);
    let teacher = build_teacher(5);
    let run = || {
        let mut s = student_for(&teacher, CompressorVariant::SruCru, ConfigMode::BandwidthOnly);
        let stats = distill(&mut s, &teacher, &ds.train, &tiny_cfg(2), |_| {}).unwrap();
        (s.weight_hash(), stats.into_iter().map(|e| (e.width_loss, e.samples)).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn single_width_distillation_is_allowed() {
    let ds = data(8);
    let teacher = build_teacher(6);
    let mut s = build_student(
        &teacher,
        BottleneckSpec::default(),
        WidthSet::new([WidthMultiplier::FULL]).unwrap(),
        ConfigMode::BandwidthOnly,
        StudentOptions::default(),
    )
    .unwrap();
    let cfg = TrainConfig {
        n_sandwich: 1,
        width_set: s.width_set.clone(),
        ..tiny_cfg(1)
    };
    let stats = distill(&mut s, &teacher, &ds.train, &cfg, |_| {}).unwrap();
    assert!(stats[0].samples.iter().all(|x| x == &vec![WidthMultiplier::FULL]));
    let bad = TrainConfig { n_sandwich: 2, ..cfg };
    assert!(distill(&mut s, &teacher, &ds.train, &bad, |_| {}).is_err());
}

fn stats_of(s: &SplitStudent) -> Vec<Vec<f64>> {
    s.segments()
        .flat_map(|(_, b)| b.named_tensors())
        .filter(|(_, _, role)| *role == TensorRole::Statistic)
        .map(|(_, t, _)| t.data().to_vec())
        .collect()
}

#[test]
fn recalibration_moves_only_statistics_and_is_idempotent() {
    let ds = data(24);
    let teacher = build_teacher(7);
    let mut s = student_for(&teacher, CompressorVariant::SruCru, ConfigMode::FullConfig);
    distill(&mut s, &teacher, &ds.train, &tiny_cfg(1), |_| {}).unwrap();
    let learned = s.learned_weight_hash();
    let before = stats_of(&s);

    post_bn_recalibrate(&mut s, &ds.train, w("0.5"), 8).unwrap();
    assert_eq!(s.learned_weight_hash(), learned);
    let once = stats_of(&s);
    assert_ne!(once, before);
    post_bn_recalibrate(&mut s, &ds.train, w("0.5"), 8).unwrap();
    assert_eq!(stats_of(&s), once);

    let empty = Split {
        images: Tensor::zeros(Shape::new(0, 3, 64, 64)),
        labels: Tensor::zeros(Shape::new(0, 1, 8, 8)),
    };
    assert!(matches!(post_bn_recalibrate(&mut s, &empty, w("0.5"), 8), Err(TrainError::EmptyDataset)));
}

#[test]
fn default_pipeline_does_not_recalibrate() {
    assert!(!TrainConfig::default().post_bn_recalibrate);
    let ds = data(12);
    let teacher = build_teacher(8);
    let cfg = tiny_cfg(1);

    let mut via_distill = student_for(&teacher, CompressorVariant::LastLayerPair, ConfigMode::BandwidthOnly);
    distill(&mut via_distill, &teacher, &ds.train, &cfg, |_| {}).unwrap();

    let mut manual = student_for(&teacher, CompressorVariant::LastLayerPair, ConfigMode::BandwidthOnly);
    let mut opt = Sgd::new(cfg.momentum).unwrap();
    distill_epoch(&mut manual, &teacher, &ds.train, &cfg, 0, &mut opt).unwrap();
    assert_eq!(stats_of(&via_distill), stats_of(&manual));

    let mut recal = manual.clone();
    let on = TrainConfig { post_bn_recalibrate: true, ..cfg.clone() };
    let mut toggled = student_for(&teacher, CompressorVariant::LastLayerPair, ConfigMode::BandwidthOnly);
    distill(&mut toggled, &teacher, &ds.train, &on, |_| {}).unwrap();
    post_bn_recalibrate(&mut recal, &ds.train, cfg.width_set.max(), cfg.batch_size).unwrap();
    assert_eq!(stats_of(&toggled), stats_of(&recal));
    assert_eq!(toggled.learned_weight_hash(), manual.learned_weight_hash());
}

#[test]
fn evaluation_is_deterministic_and_quantization_path_differs() {
    let ds = data(8);
    let teacher = build_teacher(9);
    let s = student_for(&teacher, CompressorVariant::LastLayerPair, ConfigMode::BandwidthOnly);
    let a = evaluate(&s, &teacher, &ds.val, WidthMultiplier::FULL, None).unwrap();
    let b = evaluate(&s, &teacher, &ds.val, WidthMultiplier::FULL, None).unwrap();
    assert_eq!(a, b);
    let q = evaluate(&s, &teacher, &ds.val, WidthMultiplier::FULL, Some(2)).unwrap();
    assert_ne!(a.tap_mse, q.tap_mse);
    assert!(a.teacher_var.iter().all(|v| *v > 0.0));
    assert_eq!(train::student_toy_ap(&s, &ds.val, WidthMultiplier::FULL, None).unwrap(), a.toy_ap);
}

#[test]
fn storage_does_not_depend_on_width_set() {
    let teacher = build_teacher(0);
    let sizes: Vec<usize> = ["1.0", "0.5,1.0", "0.25,0.33,0.5,0.66,1.0"]
        .iter()
        .map(|l| {
            build_student(&teacher, BottleneckSpec::default(), WidthSet::parse_list(l).unwrap(), ConfigMode::FullConfig, StudentOptions::default())
                .unwrap()
                .storage_bytes()
        })
        .collect();
    assert!(sizes.windows(2).all(|p| p[0] == p[1]));
}

#[test]
fn distillation_blow_up_names_width_and_batch() {
    let ds = data(16);
    let teacher = build_teacher(10);
    let mut s = student_for(&teacher, CompressorVariant::LastLayerPair, ConfigMode::BandwidthOnly);
    let cfg = TrainConfig { lr0: 1e200, ..tiny_cfg(1) };
    match distill(&mut s, &teacher, &ds.train, &cfg, |_| {}) {
        Err(TrainError::NonFiniteLoss { batch, .. }) => assert!(batch > 0),
        Err(TrainError::Optim(_)) => {}
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}
