use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn store_with(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t.clone(), true).unwrap();
    }
    s
}

#[test]
fn conv_identity_kernel() {
    let s = store_with(&[("w", Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap()), ("b", Tensor::zeros(&[1]))]);
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = rand_tensor(&[1, 1, 3, 3], 1);
    let xv = tape.constant(x.clone()).unwrap();
    let w = tape.param(s.id("w").unwrap()).unwrap();
    let b = tape.param(s.id("b").unwrap()).unwrap();
    let y = tape.conv2d(xv, w, Some(b), 1, 0, PadMode::Zeros).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_sum_kernel() {
    let s = store_with(&[("w", Tensor::full(&[1, 1, 2, 2], 1.0))]);
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
    let w = tape.param(s.id("w").unwrap()).unwrap();
    let y = tape.conv2d(x, w, None, 1, 0, PadMode::Zeros).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[4.0]);
}

#[test]
fn conv_output_size_formula() {
    let s = store_with(&[("w", rand_tensor(&[3, 2, 5, 5], 2))]);
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.constant(rand_tensor(&[1, 2, 9, 7], 3)).unwrap();
    let w = tape.param(s.id("w").unwrap()).unwrap();
    let y = tape.conv2d(x, w, None, 2, 2, PadMode::Zeros).unwrap();
    assert_eq!(tape.shape(y), &[1, 3, (9 + 4 - 5) / 2 + 1, (7 + 4 - 5) / 2 + 1]);
}

#[test]
fn conv_rejects_bad_shapes() {
    let s = store_with(&[("w", rand_tensor(&[3, 4, 3, 3], 2))]);
    let mut tape = Tape::new(&s, Mode::Eval);
    let w = tape.param(s.id("w").unwrap()).unwrap();
    let x = tape.constant(rand_tensor(&[1, 2, 5, 5], 3)).unwrap();
    assert!(matches!(tape.conv2d(x, w, None, 1, 1, PadMode::Zeros), Err(Error::Shape { .. })));
    let small = tape.constant(rand_tensor(&[1, 4, 1, 1], 3)).unwrap();
    assert!(tape.conv2d(small, w, None, 1, 0, PadMode::Zeros).is_err());
}

#[test]
fn replicate_padding_keeps_constant_field() {
    let s = store_with(&[("w", rand_tensor(&[2, 3, 5, 5], 4))]);
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.constant(Tensor::full(&[1, 3, 8, 8], 0.7)).unwrap();
    let w = tape.param(s.id("w").unwrap()).unwrap();
    let y = tape.conv2d(x, w, None, 2, 2, PadMode::Replicate).unwrap();
    let v = tape.value(y).data();
    for ch in v.chunks(16) {
        for e in ch {
            assert!((e - ch[0]).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let s = store_with(&[("w", rand_tensor(&[3, 3, 3, 3], 5)), ("b", rand_tensor(&[3], 6))]);
    let x = rand_tensor(&[2, 3, 8, 8], 7);
    for (stride, pad, mode) in [(1, 1, PadMode::Zeros), (2, 1, PadMode::Replicate)] {
        let report = grad_check(&s, &[x.clone()], &GradCheckOptions::default(), |t, v| {
            let w = t.param(s.id("w")?)?;
            let b = t.param(s.id("b")?)?;
            t.conv2d(v[0], w, Some(b), stride, pad, mode)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.max_rel_err < 1e-4);
    }
}

#[test]
fn pixel_shuffle_layout() {
    let s = ParamStore::<f64>::new();
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.constant(Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = tape.pixel_shuffle(x, 2).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    let x3 = tape.constant(Tensor::zeros(&[1, 3, 1, 1])).unwrap();
    assert!(tape.pixel_shuffle(x3, 2).is_err());
}

#[test]
fn pixel_shuffle_round_trip_and_sum() {
    let s = ParamStore::<f64>::new();
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = rand_tensor(&[2, 8, 4, 4], 9);
    let xv = tape.constant(x.clone()).unwrap();
    let y = tape.pixel_shuffle(xv, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 8, 8]);
    assert!((tape.value(y).sum() - x.sum()).abs() < 1e-12);
    let back = tape.pixel_unshuffle(y, 2).unwrap();
    assert_eq!(tape.value(back), &x);
}

#[test]
fn batch_norm_closed_forms() {
    let s = ParamStore::<f64>::new();
    let eps = 1e-5;
    let mut tape = Tape::new(&s, Mode::Train);
    let c = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0)).unwrap();
    let y = tape.batch_norm(c, None, eps).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![-1.0, 1.0]).unwrap()).unwrap();
    let y = tape.batch_norm(x, None, eps).unwrap();
    let e = 1.0 / (1.0f64 + eps).sqrt();
    assert!((tape.value(y).data()[0] + e).abs() < 1e-15);
    assert!((tape.value(y).data()[1] - e).abs() < 1e-15);

    let one = tape.constant(Tensor::full(&[1, 2, 1, 1], 1.0)).unwrap();
    assert!(tape.batch_norm(one, None, eps).is_err());
}

#[test]
fn batch_norm_train_statistics() {
    let s = ParamStore::<f64>::new();
    let mut tape = Tape::new(&s, Mode::Train);
    let x = tape.constant(rand_tensor(&[3, 4, 5, 5], 10)).unwrap();
    let y = tape.batch_norm(x, None, 1e-5).unwrap();
    let v = tape.value(y).data();
    for ch in 0..4 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| v[(b * 4 + ch) * 25..(b * 4 + ch + 1) * 25].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn batch_norm_running_stats_and_eval() {
    let mut s = ParamStore::<f64>::new();
    let mean = s.insert("bn.running_mean", Tensor::zeros(&[1]), false).unwrap();
    let var = s.insert("bn.running_var", Tensor::full(&[1], 1.0), false).unwrap();
    let stats = BnStats { mean, var };
    let updates = {
        let mut tape = Tape::new(&s, Mode::Train);
        let x = tape.constant(Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        tape.batch_norm(x, Some(stats), 1e-5).unwrap();
        tape.take_bn_updates()
    };
    for u in &updates {
        u.apply(&mut s, 0.1);
    }
    assert!((s.get(mean).data()[0] - 0.25).abs() < 1e-12);
    assert!((s.get(var).data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.25)).unwrap();
    let y = tape.batch_norm(x, Some(stats), 0.0).unwrap();
    let expected = (1.25 - 0.25) / (0.9 + 0.1 * 5.0 / 3.0f64).sqrt();
    assert!((tape.value(y).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn batch_norm_gradients() {
    let s = ParamStore::<f64>::new();
    let report = grad_check(&s, &[rand_tensor(&[2, 3, 4, 4], 11)], &GradCheckOptions::default(), |t, v| {
        t.batch_norm(v[0], None, 1e-5)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn elementwise_and_structural_ops() {
    let s = ParamStore::<f64>::new();
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.constant(Tensor::new(&[2], vec![-2.0, 3.0]).unwrap()).unwrap();
    let y = tape.leaky_relu(x, 0.1).unwrap();
    assert_eq!(tape.value(y).data(), &[-0.2, 3.0]);

    let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
    let b = tape.constant(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
    let bad = tape.constant(Tensor::zeros(&[1, 3, 4, 2])).unwrap();
    assert!(tape.concat(&[a, bad], 1).is_err());

    let k = tape.constant(Tensor::full(&[1, 2, 8, 8], 0.37)).unwrap();
    let d = tape.avg_downsample(k, 4).unwrap();
    assert_eq!(tape.shape(d), &[1, 2, 2, 2]);
    assert!(tape.value(d).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
}

#[test]
fn composite_op_gradients() {
    let s = store_with(&[("lw", rand_tensor(&[5, 6], 20)), ("lb", rand_tensor(&[5], 21))]);
    let inputs = [rand_tensor(&[2, 3, 4, 4], 12), rand_tensor(&[2, 2, 4, 4], 13), rand_tensor(&[2, 6], 14)];
    let report = grad_check(&s, &inputs, &GradCheckOptions::default(), |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let l = t.leaky_relu(c, 0.2)?;
        let p = t.avg_downsample(l, 2)?;
        let u = t.upsample_nearest(p, 2)?;
        let m = t.mul(u, c)?;
        let n = t.narrow(m, 1, 1, 4)?;
        let sp = t.softplus(n)?;
        let e = t.exp(n)?;
        let q = t.sub(sp, e)?;
        let sh = t.pixel_unshuffle(q, 2)?;
        let sh = t.pixel_shuffle(sh, 2)?;
        let w = t.param(s.id("lw")?)?;
        let b = t.param(s.id("lb")?)?;
        let lin = t.linear(v[2], w, Some(b))?;
        let lin = t.narrow(lin, 1, 0, 4)?;
        let bc = t.channel_broadcast(lin, 2, 4, 4)?;
        let out = t.add(sh, bc)?;
        t.scale(out, 0.5)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert!(report.checked > 50);
}

#[test]
fn mse_and_mean_gradients() {
    let s = ParamStore::<f64>::new();
    let inputs = [rand_tensor(&[3, 4], 15), rand_tensor(&[3, 4], 16)];
    let report = grad_check(&s, &inputs, &GradCheckOptions::default(), |t, v| {
        let m = t.mse(v[0], v[1])?;
        let a = t.mean(v[0])?;
        let b = t.sum(v[1])?;
        let ab = t.add(a, b)?;
        t.add(m, ab)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn gaussian_bits_gradients() {
    let s = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let y = Tensor::from_fn(&[40], |_| rng.random_range(-4.0..4.0));
    let mu = Tensor::from_fn(&[40], |_| rng.random_range(-2.0..2.0));
    let sig = Tensor::from_fn(&[40], |_| rng.random_range(0.3..3.0));
    let report = grad_check(&s, &[y, mu, sig], &GradCheckOptions::default(), |t, v| {
        t.gaussian_bits(v[0], v[1], v[2])
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn linear_function_is_exact() {
    let s = store_with(&[("w", rand_tensor(&[3, 5], 30))]);
    let report = grad_check(&s, &[rand_tensor(&[4, 5], 31)], &GradCheckOptions::default(), |t, v| {
        let w = t.param(s.id("w")?)?;
        t.linear(v[0], w, None)
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-8, "{}", report.max_rel_err);
}

#[test]
fn leaky_relu_kink_is_nudged() {
    let s = ParamStore::<f64>::new();
    let x = Tensor::new(&[4], vec![0.0, -0.0, 1e-9, -1e-9]).unwrap();
    let report = grad_check(&s, &[x], &GradCheckOptions::default(), |t, v| t.leaky_relu(v[0], 0.2)).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert_eq!(report.checked, 4);
}

#[test]
fn round_ste_forward_and_identity_gradient() {
    let s = ParamStore::<f64>::new();
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.input(Tensor::new(&[3], vec![2.3, -1.5, 4.0]).unwrap()).unwrap();
    let r = tape.round_ste(x).unwrap();
    assert_eq!(tape.value(r).data(), &[2.0, -2.0, 4.0]);
    let l = tape.sum(r).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_visits_shared_nodes_once() {
    let s = ParamStore::<f64>::new();
    let mut tape = Tape::new(&s, Mode::Eval);
    let x = tape.input(Tensor::scalar(3.0)).unwrap();
    let a = tape.mul(x, x).unwrap();
    let b = tape.add(a, x).unwrap();
    let c = tape.mul(b, a).unwrap();
    let g = tape.backward(c).unwrap();
    // c = x^4 + x^3 -> 4x^3 + 3x^2
    assert_eq!(g.wrt(x).unwrap()[0], 4.0 * 27.0 + 3.0 * 9.0);
    tape.clear();
    assert!(tape.is_empty());
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let s = store_with(&[("w", rand_tensor(&[4, 3, 3, 3], 40))]);
    let run = || {
        let mut tape = Tape::new(&s, Mode::Train);
        let x = tape.constant(rand_tensor(&[4, 3, 8, 8], 41)).unwrap();
        let w = tape.param(s.id("w").unwrap()).unwrap();
        let y = tape.conv2d(x, w, None, 1, 1, PadMode::Zeros).unwrap();
        let y = tape.batch_norm(y, None, 1e-5).unwrap();
        tape.value(y).clone()
    };
    crate::exec::set_parallel(false);
    let a = run();
    crate::exec::set_parallel(true);
    let b = run();
    assert_eq!(a, b);
}
