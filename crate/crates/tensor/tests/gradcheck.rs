//! Central finite-difference checks for every differentiable tape op.

use flowlab_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Builds a scalar from the given inputs; the check perturbs each input element.
fn check<G>(inputs: &[Tensor<f64>], build: G)
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&tape, &vars);
    let grads = tape.backward(out);

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let v = build(&tape, &vars).value().item();
        v
    };

    let h = 1e-6;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = analytic.data()[i];
            let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
            assert!(err < 1e-5, "input {k} elem {i}: analytic {an} vs fd {fd}");
        }
    }
}

/// Fixed random weighting so every output element matters.
fn weigh<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&v.shape(), &mut rng);
    v.mul(tape.constant(w)).sum()
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[2, 3], &mut rng);
    check(&[a, b], |t, v| {
        let y = v[0]
            .mul(v[1])
            .add(v[0].tanh())
            .sub(v[1].sigmoid())
            .add(v[0].exp().scale(0.3))
            .add(v[1].square())
            .add_scalar(2.0)
            .add(v[0].scale(3.0).relu());
        weigh(t, y, 11)
    });
}

#[test]
fn conv_bias_and_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let x = random(&[2, 2, 6, 6], &mut rng);
        let w = random(&[3, 2, k, k], &mut rng);
        let b = random(&[3], &mut rng);
        check(&[x, w, b], |t, v| {
            let y = v[0].conv2d(v[1], stride, pad).add_bias(v[2]);
            let pooled = if y.shape()[2] % 2 == 0 { y.max_pool2() } else { y };
            weigh(t, pooled.global_avg_pool(), 5)
        });
    }
}

#[test]
fn channel_broadcasts_and_narrow() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 4, 3, 3], &mut rng);
    let s = random(&[2, 4], &mut rng);
    let b = random(&[2, 2], &mut rng);
    let mask = random(&[4, 3, 3], &mut rng);
    check(&[x, s, b], move |t, v| {
        let y = v[0].scale_channels(v[1]).narrow(1, 2).add_bias(v[2]);
        let z = v[0].mul_const(&mask).sum_per_sample();
        weigh(t, y, 6).add(weigh(t, z, 7))
    });
}

#[test]
fn linear_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let b = random(&[4], &mut rng);
    let targets = Tensor::from_f64(
        &[3, 4],
        &[1.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.5, 0.0, 0.0, 0.0, 0.3, 0.7],
    );
    check(&[x, w, b], move |_, v| {
        let logits = v[0].matmul(v[1]).add_bias(v[2]);
        logits.softmax_cross_entropy(&targets).mean()
    });
}

#[test]
fn reshape_flatten_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 2, 2, 2], &mut rng);
    check(&[x], |t, v| {
        let y = v[0].flatten().reshape(&[4, 4]).square();
        weigh(t, y, 9).add(v[0].mean())
    });
}

#[test]
fn cross_entropy_reference_values() {
    let tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.0]));
    let l = logits.softmax_cross_entropy(&Tensor::from_f64(&[1, 2], &[1.0, 0.0]));
    assert!((l.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
}

