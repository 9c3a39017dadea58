use flowlab_core::flowcore::{bpd_from_nats, EncodeMode, FlowArch, FlowModel, GlobalCode, Preprocess};
use flowlab_core::seed;
use flowlab_core::synthdata::{generate_dataset, DatasetSpec};
use flowlab_core::Image;
use flowlab_tensor::{Scalar, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn random_images(n: usize, h: usize, w: usize, s: u64) -> Vec<Image> {
    let mut rng = seed::stream(s, "test-images", 0);
    (0..n)
        .map(|_| {
            let px = (0..h * w * 3).map(|_| f32::from(rng.random::<u8>()) / 255.0).collect();
            Image::new(h, w, px).unwrap()
        })
        .collect()
}

fn small_arch(h: usize, w: usize) -> FlowArch {
    FlowArch {
        d_z: 8,
        num_blocks: 4,
        hidden: 8,
        encoder_channels: [4, 8, 8],
        ..FlowArch::new(h, w)
    }
}

/// Adds uniform noise to every parameter so no layer is the identity.
fn jitter<F: Scalar>(model: &mut FlowModel<F>, amp: f64, s: u64) {
    let mut rng = seed::stream(s, "jitter", 0);
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += F::lit(rng.random_range(-amp..amp));
        }
    }
}

#[test]
fn identity_flow_returns_preprocessed_input() {
    let model = FlowModel::<f32>::new(small_arch(8, 8), 3).unwrap();
    let imgs = random_images(4, 8, 8, 1);
    let refs: Vec<&Image> = imgs.iter().collect();
    let codes = model.encode_mean(&refs).unwrap();
    let pp = Preprocess::default();
    for (img, (z, nu)) in imgs.iter().zip(&codes) {
        assert_eq!(z.len(), 8);
        assert_eq!(nu.shape(), [8, 8, 3]);
        for (v, n) in img.pixels().iter().zip(nu.data()) {
            assert_eq!(*n, pp.forward(f64::from(*v)) as f32);
        }
        // any z decodes to the inverse preprocessing of nu
        let other = GlobalCode(vec![1.5; 8]);
        let a = model.decode(z, nu).unwrap();
        let b = model.decode(&other, nu).unwrap();
        assert_eq!(a, b);
        for (p, n) in a.pixels().iter().zip(nu.data()) {
            assert!((f64::from(*p) - pp.inverse(f64::from(*n))).abs() < 1e-6);
        }
    }
}

#[test]
fn mean_encoding_is_deterministic_and_sampling_is_not() {
    let mut model = FlowModel::<f32>::new(small_arch(8, 8), 4).unwrap();
    jitter(&mut model, 0.05, 1);
    let imgs = random_images(2, 8, 8, 2);
    let a = model.encode(&imgs[0], EncodeMode::Mean, &mut seed::stream(1, "a", 0)).unwrap();
    let b = model.encode(&imgs[0], EncodeMode::Mean, &mut seed::stream(2, "b", 0)).unwrap();
    assert_eq!(a, b);
    let s = model.encode(&imgs[0], EncodeMode::Sample, &mut seed::stream(1, "a", 0)).unwrap();
    assert_ne!(s.0, a.0);
}

#[test]
fn round_trip_with_perturbed_weights() {
    let mut model = FlowModel::<f32>::new(small_arch(8, 8), 5).unwrap();
    jitter(&mut model, 0.05, 2);
    let imgs = random_images(6, 8, 8, 3);
    let refs: Vec<&Image> = imgs.iter().collect();
    let codes = model.encode_mean(&refs).unwrap();
    for (img, (z, nu)) in imgs.iter().zip(&codes) {
        let back = model.decode(z, nu).unwrap();
        assert!(back.max_abs_diff(img) < 1e-4, "{}", back.max_abs_diff(img));
    }
    // swapped codes still give valid images
    let mixed = model.decode(&codes[0].0, &codes[1].1).unwrap();
    assert!(mixed.is_valid());
    assert_eq!(mixed.shape(), imgs[0].shape());
}

#[test]
fn flow_inverse_then_forward_is_identity() {
    let mut model = FlowModel::<f32>::new(small_arch(8, 8), 6).unwrap();
    jitter(&mut model, 0.05, 3);
    let mut rng = seed::stream(7, "nu", 0);
    let nu = Tensor::<f32>::new(&[3, 3, 8, 8], (0..3 * 192).map(|_| rng.random_range(-2.0..2.0)).collect());
    let z = Tensor::<f32>::new(&[3, 8], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect());
    let y = model.flow_inverse(&nu, &z).unwrap();
    let (again, _) = model.flow_forward(&y, &z).unwrap();
    assert!(again.max_abs_diff(&nu) < 1e-4);
}

#[test]
fn block_log_determinants_cancel() {
    let mut model = FlowModel::<f32>::new(small_arch(8, 8), 7).unwrap();
    jitter(&mut model, 0.05, 4);
    let mut rng = seed::stream(8, "x", 0);
    let x = Tensor::<f32>::new(&[2, 3, 8, 8], (0..2 * 192).map(|_| rng.random_range(-2.0..2.0)).collect());
    let z = Tensor::<f32>::new(&[2, 8], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
    for i in 0..model.num_blocks() {
        let (fwd, inv, back) = model.block_round_trip(i, &x, &z);
        for (f, b) in fwd.iter().zip(&inv) {
            assert!(f.abs() > 1e-3, "block {i} should not be volume preserving");
            assert!((f + b).abs() < 1e-4, "block {i}: {f} + {b}");
        }
        assert!(back.max_abs_diff(&x) < 1e-4);
    }
}

#[test]
fn block_log_determinant_matches_dense_jacobian() {
    // Tiny 2x2 input: the full 12x12 Jacobian is cheap to build by central differences.
    let arch = FlowArch {
        d_z: 3,
        num_blocks: 4,
        hidden: 4,
        encoder_channels: [2, 2, 2],
        ..FlowArch::new(2, 2)
    };
    let mut model = FlowModel::<f64>::new(arch, 1).unwrap();
    jitter(&mut model, 0.3, 5);
    let mut rng = seed::stream(9, "x", 0);
    let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z = Tensor::<f64>::new(&[1, 3], vec![0.3, -0.7, 1.1]);
    for blk in 0..4 {
        let ld = model.block_forward(blk, &Tensor::new(&[1, 3, 2, 2], x.clone()), &z).1[0];
        let h = 1e-6;
        let mut jac = vec![vec![0.0; 12]; 12];
        for j in 0..12 {
            let (mut a, mut b) = (x.clone(), x.clone());
            a[j] += h;
            b[j] -= h;
            let fa = forward_block(&model, blk, &a, &z);
            let fb = forward_block(&model, blk, &b, &z);
            for i in 0..12 {
                jac[i][j] = (fa[i] - fb[i]) / (2.0 * h);
            }
        }
        let det = determinant(jac);
        assert!((det.abs().ln() - ld).abs() < 1e-6, "block {blk}: {} vs {ld}", det.abs().ln());
    }
}

fn forward_block(model: &FlowModel<f64>, blk: usize, x: &[f64], z: &Tensor<f64>) -> Vec<f64> {
    model.block_forward(blk, &Tensor::new(&[1, 3, 2, 2], x.to_vec()), z).0.into_data()
}

fn determinant(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        if m[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        det *= m[c][c];
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    det
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    let arch = FlowArch {
        d_z: 4,
        num_blocks: 4,
        hidden: 4,
        encoder_channels: [2, 2, 2],
        ..FlowArch::new(4, 4)
    };
    let mut model = FlowModel::<f64>::new(arch, 2).unwrap();
    jitter(&mut model, 0.2, 6);
    let imgs = random_images(2, 4, 4, 4);
    let refs: Vec<&Image> = imgs.iter().collect();
    let streams = || (0..2).map(|i| seed::stream(3, "gc", i)).collect::<Vec<_>>();
    let (_, _, grads) = model.loss_and_grads(&refs, &mut streams(), 0.7).unwrap();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
    let base = model.params().flatten();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let mut eval = |d: f64| {
            let mut p = base.clone();
            p[j] += d;
            model.params_mut().assign_flat(&p);
            model.loss_and_grads(&refs, &mut streams(), 0.7).unwrap().0
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let a = analytic[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}

#[test]
fn kl_weight_has_no_effect_at_standard_posterior() {
    // A fresh encoder outputs mu = 0 and sigma = 1, where the KL term vanishes.
    let model = FlowModel::<f64>::new(small_arch(8, 8), 9).unwrap();
    let imgs = random_images(3, 8, 8, 5);
    let refs: Vec<&Image> = imgs.iter().collect();
    let streams = || (0..3).map(|i| seed::stream(4, "kl", i)).collect::<Vec<_>>();
    let a = model.loss_and_grads(&refs, &mut streams(), 0.0).unwrap().0;
    let b = model.loss_and_grads(&refs, &mut streams(), 1.0).unwrap().0;
    assert_eq!(a, b);

    let mut model = model;
    jitter(&mut model, 0.1, 7);
    let a = model.loss_and_grads(&refs, &mut streams(), 0.0).unwrap().0;
    let b = model.loss_and_grads(&refs, &mut streams(), 1.0).unwrap().0;
    assert!(b > a, "KL term must be positive away from the prior");
}

#[test]
fn uniform_density_is_eight_bits() {
    assert_eq!(bpd_from_nats(0.0, 3072), 8.0);
    assert_eq!(bpd_from_nats(0.0, 12), 8.0);
}

#[test]
fn nll_is_per_example() {
    let mut model = FlowModel::<f32>::new(small_arch(8, 8), 10).unwrap();
    jitter(&mut model, 0.05, 8);
    let imgs = random_images(5, 8, 8, 6);
    let fwd: Vec<&Image> = imgs.iter().collect();
    let rev: Vec<&Image> = imgs.iter().rev().collect();
    let a = model.nll_bpd_batch(&fwd, 11).unwrap();
    let mut b = model.nll_bpd_batch(&rev, 11).unwrap();
    b.reverse();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let mut model = FlowModel::<f32>::new(small_arch(8, 8), 11).unwrap();
    jitter(&mut model, 0.05, 9);
    let bytes = model.to_bytes().unwrap();
    let p = std::path::Path::new("mem");
    let back = FlowModel::from_bytes(&bytes, p).unwrap();
    assert_eq!(back.params().flatten(), model.params().flatten());
    assert_eq!(back.arch(), model.arch());
    assert!(FlowModel::from_bytes(&bytes[..bytes.len() - 4], p).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(FlowModel::from_bytes(&bad, p).is_err());
}

#[test]
fn short_training_lowers_bpd() {
    let spec = DatasetSpec::new(4, 6, 64, 24, 0.9, 1).unwrap().with_size(8, 8).unwrap();
    let ds = generate_dataset(&spec).unwrap();
    let refs: Vec<&Image> = ds.train.iter().map(|e| &e.image).collect();
    let cfg = flowlab_core::flowcore::FlowTrainConfig {
        epochs: 4,
        batch_size: 16,
        lr: 2e-3,
        ..Default::default()
    };
    let init = FlowModel::<f32>::new(small_arch(8, 8), cfg.seed).unwrap();
    let (model, log) = flowlab_core::flowcore::train_flow(&refs, small_arch(8, 8), &cfg).unwrap();
    assert_eq!(log.epoch_bpd.len(), 4);
    assert_ne!(model.params().flatten(), init.params().flatten());
    assert!(log.epoch_bpd[3] < log.epoch_bpd[0], "{:?}", log.epoch_bpd);
}

proptest! {
    #[test]
    fn preprocessing_round_trips(v in 0u8..=255) {
        let pp = Preprocess::default();
        let x = f64::from(v) / 255.0;
        prop_assert!((pp.inverse(pp.forward(x)) - x).abs() < 1e-12);
    }
}
