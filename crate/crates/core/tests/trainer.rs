use flowlab_core::flowaug::{Augmenter, Perturbation, PerturbSpec};
use flowlab_core::flowcore::{FlowArch, FlowModel};
use flowlab_core::seed::{self, StreamRng};
use flowlab_core::synthdata::{generate_dataset, DatasetSpec, LabeledExample};
use flowlab_core::trainer::*;
use flowlab_core::{Error, Image, Result};
use proptest::prelude::*;
use rand::Rng;

fn random_images(n: usize, h: usize, w: usize, s: u64) -> Vec<Image> {
    let mut rng = seed::stream(s, "test-images", 0);
    (0..n)
        .map(|_| {
            let px = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
            Image::new(h, w, px).unwrap()
        })
        .collect()
}

fn random_targets(n: usize, c: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn on_simplex(t: &[f64]) -> bool {
    t.iter().all(|&v| v >= 0.0) && (t.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

fn changed_pixels(a: &Image, b: &Image) -> usize {
    a.pixels().chunks(3).zip(b.pixels().chunks(3)).filter(|(p, q)| p != q).count()
}

/// Additive pixel noise; stands in for a flow transform in gradient checks.
struct Noise(f32);

impl Transform for Noise {
    fn apply(&self, images: &[&Image], rng: &mut StreamRng) -> Result<Vec<Image>> {
        Ok(images
            .iter()
            .map(|img| {
                let mut out = (*img).clone();
                for v in out.pixels_mut() {
                    *v = (*v + rng.random_range(-self.0..self.0)).clamp(0.0, 1.0);
                }
                out
            })
            .collect())
    }
}

#[test]
fn cross_entropy_reference_values() {
    assert!((cross_entropy(&[0.0, 0.0], &[1.0, 0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((cross_entropy(&[0.0, 0.0], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
    // softmax probability of class 0 is 1 / (1 + e^-20)
    let oracle = (-20.0f64).exp().ln_1p();
    let got = cross_entropy(&[10.0, -10.0], &[1.0, 0.0]);
    assert!((got - oracle).abs() / oracle < 1e-9, "{got} vs {oracle}");
    assert!((got - 2.06e-9).abs() < 1e-11);
    assert!(cross_entropy(&[1000.0, -1000.0], &[0.0, 1.0]).is_finite());
}

#[test]
fn mixup_degenerate_weights() {
    let x1 = Image::filled(4, 4, 0.0);
    let x2 = Image::filled(4, 4, 1.0);
    let (y1, y2) = (one_hot(0, 3), one_hot(2, 3));
    let (x, y) = mixup_with_lambda(&x1, &y1, &x2, &y2, 1.0).unwrap();
    assert_eq!((x, y), (x1.clone(), y1.clone()));
    let (x, y) = mixup_with_lambda(&x1, &y1, &x2, &y2, 0.5).unwrap();
    assert!(x.pixels().iter().all(|&v| v == 0.5));
    assert_eq!(y, vec![0.5, 0.0, 0.5]);
}

#[test]
fn soft_targets_stay_on_simplex() {
    let imgs = random_images(2, 8, 8, 1);
    let mut rng = seed::stream(2, "simplex", 0);
    let y1 = one_hot(1, 4);
    let y2 = vec![0.25; 4];
    for _ in 0..10_000 {
        let alpha = rng.random_range(0.1..4.0);
        let (_, a) = mixup_batch(&imgs[0], &y1, &imgs[1], &y2, alpha, &mut rng).unwrap();
        let (_, b) = cutmix_batch(&imgs[0], &y1, &imgs[1], &y2, alpha, &mut rng).unwrap();
        assert!(on_simplex(&a) && on_simplex(&b), "{a:?} {b:?}");
    }
}

#[test]
fn cutout_changed_pixel_counts() {
    let x = Image::filled(12, 12, 0.5);
    let mut rng = seed::stream(3, "cutout", 0);
    assert_eq!(cutout(&x, 0, 0.0, &mut rng).unwrap(), x);

    let interior = cutout_at(&x, Rect::centred(6, 6, 4, 4, 12, 12), 0.0);
    assert_eq!(changed_pixels(&x, &interior), 16);
    let corner = cutout_at(&x, Rect::centred(0, 0, 4, 4, 12, 12), 0.0);
    assert_eq!(changed_pixels(&x, &corner), 4);

    for _ in 0..500 {
        let y = cutout(&x, 5, 0.0, &mut rng).unwrap();
        let n = changed_pixels(&x, &y);
        assert!((1..=25).contains(&n), "{n}");
    }
    assert!(cutout(&x, 3, 1.5, &mut rng).is_err());
}

#[test]
fn cutmix_area_weights() {
    let x1 = Image::filled(32, 32, 0.0);
    let x2 = Image::filled(32, 32, 1.0);
    let (y1, y2) = (one_hot(0, 2), one_hot(1, 2));
    let (x, y) = cutmix_with_rect(&x1, &y1, &x2, &y2, Rect::centred(16, 16, 16, 16, 32, 32)).unwrap();
    assert_eq!(y[0], 0.75);
    assert_eq!(changed_pixels(&x1, &x), 256);

    let none = Rect { top: 5, left: 5, height: 0, width: 0 };
    assert_eq!(cutmix_with_rect(&x1, &y1, &x2, &y2, none).unwrap(), (x1.clone(), y1.clone()));
    let full = Rect { top: 0, left: 0, height: 32, width: 32 };
    assert_eq!(cutmix_with_rect(&x1, &y1, &x2, &y2, full).unwrap(), (x2.clone(), y2.clone()));
}

fn toy() -> Classifier<f64> {
    let arch = ClassifierArch {
        widths: vec![3, 3, 3, 3],
        ..ClassifierArch::new(3, 4, 4)
    };
    Classifier::<f64>::new(arch, 11).unwrap()
}

/// Worst relative error between analytic and central-difference gradients.
fn gradient_error(clf: &mut Classifier<f64>, loss: &dyn Fn(&Classifier<f64>) -> LossEval<f64>) -> f64 {
    let analytic: Vec<f64> = loss(clf).grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let base = clf.params().flatten();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let mut eval = |d: f64| {
            let mut p = base.clone();
            p[j] += d;
            clf.params_mut().assign_flat(&p);
            loss(clf).value
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic[j];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
    }
    clf.params_mut().assign_flat(&base);
    worst
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut clf = toy();
    assert!(clf.params().num_scalars() <= 500);
    let mut rng = seed::stream(4, "gc-batches", 0);
    for b in 0..20u64 {
        let imgs = random_images(2, 4, 4, 100 + b);
        let batch = Batch::new(imgs.iter().collect(), random_targets(2, 3, &mut rng)).unwrap();
        let lambda = rng.random_range(0.0..2.0);
        let (l1, l2) = (rng.random_range(0.0..2.0), rng.random_range(0.0..0.2));
        let t = Noise(0.1);
        let stream = || seed::stream(b, "gc-noise", 0);

        let e = gradient_error(&mut clf, &|c| loss_flowaug(c, &batch, &t, &mut stream()).unwrap());
        assert!(e < 1e-3, "flowaug batch {b}: {e}");
        let e = gradient_error(&mut clf, &|c| loss_flowaug_std(c, &batch, &t, lambda, &mut stream()).unwrap());
        assert!(e < 1e-3, "flowaug+std batch {b}: {e}");
        let e = gradient_error(&mut clf, &|c| {
            loss_combine(c, &batch, &t, &Noise(0.2), l1, l2, &mut stream()).unwrap()
        });
        assert!(e < 1e-3, "combine batch {b}: {e}");
    }
}

#[test]
fn lambda_properties() {
    let clf = toy();
    let imgs = random_images(4, 4, 4, 7);
    let mut rng = seed::stream(5, "lambda", 0);
    let batch = Batch::new(imgs.iter().collect(), random_targets(4, 3, &mut rng)).unwrap();
    let t = Noise(0.1);
    let s = || seed::stream(6, "lambda-noise", 0);
    let base = loss_flowaug(&clf, &batch, &t, &mut s()).unwrap().value;
    assert!(base >= 0.0 && base.is_finite());
    assert_eq!(loss_flowaug_std(&clf, &batch, &t, 0.0, &mut s()).unwrap().value, base);
    assert_eq!(loss_combine(&clf, &batch, &t, &Noise(0.3), 0.0, 0.0, &mut s()).unwrap().value, base);
    let mut prev = base;
    for lambda in [0.01, 0.05, 0.1, 0.5, 1.0, 3.0] {
        let v = loss_flowaug_std(&clf, &batch, &t, lambda, &mut s()).unwrap().value;
        assert!(v >= prev);
        prev = v;
    }
    let erm = weighted_ce(
        &clf,
        &[Term {
            images: &batch.images,
            targets: &batch.targets,
            weight: 1.0,
        }],
    )
    .unwrap()
    .value;
    let doubled = loss_flowaug_std(&clf, &batch, &Identity, 1.0, &mut s()).unwrap().value;
    assert!((doubled - 2.0 * erm).abs() < 1e-12);
}

#[test]
fn zero_flow_perturbation_matches_erm_on_reconstructions() {
    let flow = FlowModel::new(
        FlowArch {
            d_z: 8,
            num_blocks: 2,
            hidden: 8,
            encoder_channels: [4, 4, 4],
            ..FlowArch::new(8, 8)
        },
        3,
    )
    .unwrap();
    let clf = Classifier::<f32>::new(ClassifierArch::new(3, 8, 8), 1).unwrap();
    let imgs = random_images(6, 8, 8, 9);
    let refs: Vec<&Image> = imgs.iter().collect();
    let targets: Vec<Vec<f64>> = (0..6).map(|i| one_hot(i % 3, 3)).collect();
    let batch = Batch::new(refs.clone(), targets.clone()).unwrap();
    let spec = PerturbSpec {
        distribution: Perturbation::Uniform { lo: -1e-12, hi: 1e-12 },
        ..Default::default()
    };
    let t = FlowGaussian { model: &flow, spec };
    let flow_loss = loss_flowaug(&clf, &batch, &t, &mut seed::stream(1, "zero", 0)).unwrap().value;
    let recon = Augmenter::new(&flow, &refs).unwrap().reconstructions().unwrap();
    let recon_refs: Vec<&Image> = recon.iter().collect();
    let erm = weighted_ce(
        &clf,
        &[Term {
            images: &recon_refs,
            targets: &targets,
            weight: 1.0,
        }],
    )
    .unwrap()
    .value;
    assert!((flow_loss - erm).abs() < 1e-5, "{flow_loss} vs {erm}");
}

#[test]
fn config_validation() {
    for l2 in [0.01, 0.05, 0.1] {
        TrainConfig::combine(1.0, l2).validate().unwrap();
    }
    assert!(TrainConfig::combine(1.0, -0.1).validate().is_err());
    assert!(TrainConfig::flowaug_plus_std(-1.0).validate().is_err());
    let cfg = TrainConfig {
        decay_epochs: Some(vec![5, 5]),
        ..TrainConfig::standard()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::standard()
    };
    assert_eq!(cfg.decay_schedule(), vec![4, 6]);
    assert!((cfg.lr_at(5) - 0.005).abs() < 1e-12);
}

fn tiny_data(seed: u64, n: usize) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let spec = DatasetSpec::new(4, 6, n, 24, 0.9, seed).unwrap().with_size(16, 16).unwrap();
    let ds = generate_dataset(&spec).unwrap();
    (ds.train, ds.test)
}

#[test]
fn flow_method_without_flow_fails_before_training() {
    let (train_set, test_set) = tiny_data(1, 16);
    let mut epochs_seen = 0;
    let err = train_with(&train_set, &test_set, 4, &TrainConfig::flowaug_gauss(), None, |_| epochs_seen += 1)
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let cfg = TrainConfig {
        flow_checkpoint: Some("/nonexistent/flow.bin".into()),
        ..TrainConfig::combine(1.0, 0.1)
    };
    assert!(matches!(train(&train_set, &test_set, 4, &cfg, None), Err(Error::Config(_))));
    assert_eq!(epochs_seen, 0);
}

#[test]
fn standard_loss_decreases_within_one_epoch() {
    let mut decreased = 0;
    for s in 0..20 {
        let (train_set, _) = tiny_data(100 + s, 64);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed: s,
            ..TrainConfig::standard()
        };
        let out = train(&train_set, &[], 4, &cfg, None).unwrap();
        let l = &out.log.step_losses;
        assert_eq!(l.len(), 4);
        decreased += (l[l.len() - 1] < l[0]) as usize;
    }
    assert!(decreased >= 18, "{decreased}/20");
}

#[test]
fn training_is_deterministic() {
    let (train_set, test_set) = tiny_data(3, 96);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::cutmix(1.0)
    };
    let a = train(&train_set, &test_set, 4, &cfg, None).unwrap();
    let b = train(&train_set, &test_set, 4, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.last.params().flatten(), b.last.params().flatten());
    assert_eq!(a.log.epochs.len(), 2);
    assert!(a.log.best_accuracy.unwrap() >= a.log.last_accuracy.unwrap());
}

#[test]
fn standard_ignores_k() {
    let (train_set, _) = tiny_data(5, 32);
    let base = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::standard()
    };
    let a = train(&train_set, &[], 4, &base, None).unwrap();
    let b = train(&train_set, &[], 4, &TrainConfig { k: 0, ..base }, None).unwrap();
    assert_eq!(a.log.step_losses, b.log.step_losses);
}

#[test]
fn flow_methods_run_end_to_end() {
    let (train_set, test_set) = tiny_data(6, 32);
    let flow = FlowModel::new(
        FlowArch {
            d_z: 8,
            num_blocks: 2,
            hidden: 8,
            encoder_channels: [4, 4, 4],
            ..FlowArch::new(16, 16)
        },
        2,
    )
    .unwrap();
    let methods = [
        TrainConfig::flowaug_gauss(),
        TrainConfig::flowaug_mix(),
        TrainConfig::flowaug_plus_std(0.5),
        TrainConfig::combine(1.0, 0.05),
        TrainConfig::flowaug_gauss_cutmix(1.0),
        TrainConfig {
            inline: true,
            ..TrainConfig::combine(1.0, 0.1)
        },
        TrainConfig {
            k: 2,
            ..TrainConfig::flowaug_gauss()
        },
    ];
    for m in methods {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..m
        };
        let out = train(&train_set, &test_set, 4, &cfg, Some(&flow)).unwrap();
        let steps = if cfg.inline { 2 } else { 2 * cfg.k };
        assert_eq!(out.log.step_losses.len(), steps, "{:?}", cfg.method);
        assert!(out.log.step_losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }
}

#[test]
fn classifier_checkpoint_round_trip() {
    let clf = Classifier::<f32>::new(ClassifierArch::new(4, 16, 16), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clf.bin");
    clf.save(&path).unwrap();
    let back = Classifier::load(&path).unwrap();
    assert_eq!(back.params().flatten(), clf.params().flatten());
    let imgs = random_images(3, 16, 16, 2);
    let refs: Vec<&Image> = imgs.iter().collect();
    assert_eq!(back.predict(&refs).unwrap(), clf.predict(&refs).unwrap());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    assert!(matches!(Classifier::from_bytes(&bytes, &path), Err(Error::Format { .. })));
}

#[test]
fn predictions_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.csv");
    write_predictions(&path, &[0, 1, 2], &[0, 2, 2]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("index,true_class,pred_class\n0,0,0\n"));
    let rows = flowlab_core::metrics::load_predictions(&path).unwrap();
    assert_eq!(rows[1].pred_class, 2);
}

proptest! {
    #[test]
    fn cross_entropy_is_nonnegative(
        logits in prop::collection::vec(-50.0f64..50.0, 2..6),
        raw in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let c = logits.len();
        let s: f64 = raw[..c].iter().sum::<f64>() + 1e-9;
        let t: Vec<f64> = raw[..c].iter().map(|v| (v + 1e-9 / c as f64) / s).collect();
        let v = cross_entropy(&logits, &t);
        prop_assert!(v.is_finite() && v >= -1e-12);
    }

    #[test]
    fn mixed_targets_on_simplex(alpha in 0.05f64..5.0, seed in 0u64..1000, a in 0usize..3, b in 0usize..3) {
        let imgs = random_images(2, 8, 8, seed);
        let mut rng = seed::stream(seed, "prop-mix", 0);
        let (xm, ym) = mixup_batch(&imgs[0], &one_hot(a, 3), &imgs[1], &one_hot(b, 3), alpha, &mut rng).unwrap();
        let (xc, yc) = cutmix_batch(&imgs[0], &one_hot(a, 3), &imgs[1], &one_hot(b, 3), alpha, &mut rng).unwrap();
        prop_assert!(on_simplex(&ym) && on_simplex(&yc));
        prop_assert!(xm.is_valid() && xc.is_valid());
    }
}
