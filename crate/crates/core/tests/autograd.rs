mod common;

use common::{grad_check, random, random_off_zero, rng};
use proptest::prelude::*;
use rand::Rng;
use sage::tensor::nn::{BatchNorm2d, Conv2d, Linear, Mode};
use sage::tensor::{Tape, Tensor};
use sage::Error;

const OP_TOL: f64 = 1e-3;
const EPS: f64 = 1e-3;
const TRIALS: u64 = 20;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_identity_kernel_doubles() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![1, 1, 3, 3], 1.0)).unwrap();
    let w = tape.constant(Tensor::full(vec![1, 1, 1, 1], 2.0)).unwrap();
    let b = tape.constant(Tensor::zeros(vec![1])).unwrap();
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(vec![1, 1, 3, 3], 2.0));
}

#[test]
fn conv2d_output_shape_arithmetic() {
    let mut r = rng(1);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&[2, 3, 8, 8], &mut r)).unwrap();
    let w = tape.constant(random(&[5, 3, 3, 3], &mut r)).unwrap();
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 5, 4, 4]);
}

#[test]
fn conv2d_rejects_mismatched_channels() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 2, 4, 4])).unwrap();
    let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3])).unwrap();
    assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
    let w = tape.constant(Tensor::zeros(vec![1, 2, 7, 7])).unwrap();
    assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv2d_matches_direct_convolution() {
    let mut r = rng(2);
    let (x, w) = (random(&[1, 2, 5, 5], &mut r), random(&[3, 2, 3, 3], &mut r));
    let mut tape = Tape::<f64>::new();
    let (xv, wv) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap());
    let y = tape.conv2d(xv, wv, None, 2, 1).unwrap();
    let out = tape.value(y);
    for co in 0..3 {
        for oy in 0..3 {
            for ox in 0..3 {
                let mut s = 0.0;
                for ci in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = ((oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                s += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                assert!((out.data()[(co * 3 + oy) * 3 + ox] - s).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(100 + trial);
        let (stride, pad, k) = [(1, 1, 3), (2, 1, 3), (2, 2, 5), (1, 0, 1)][trial as usize % 4];
        let inputs = [random(&[2, 2, 6, 6], &mut r), random(&[3, 2, k, k], &mut r), random(&[3], &mut r)];
        let err = grad_check(|tp, v| tp.conv2d(v[0], v[1], Some(v[2]), stride, pad), &inputs, EPS);
        assert!(err < OP_TOL, "trial {trial}: rel err {err}");
    }
}

#[test]
fn batch_norm_leaves_normalized_input_alone() {
    // per-channel mean 0, biased variance 1
    let x = t(&[1, 2, 2, 2], &[1.0, -1.0, 1.0, -1.0, 2f64.sqrt(), -(2f64.sqrt()), 0.0, 0.0]);
    let bn = BatchNorm2d::<f64>::new(2);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let y = bn.forward(&mut tape, xv, Mode::Train).unwrap();
    assert!(tape.value(y).max_abs_diff(&x).unwrap() < 1e-4);
}

#[test]
fn batch_norm_constant_channel_maps_to_beta() {
    let mut bn = BatchNorm2d::<f64>::new(1);
    bn.beta.data_mut()[0] = 0.25;
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::full(vec![2, 1, 3, 3], 4.0)).unwrap();
    let y = bn.forward(&mut tape, xv, Mode::Train).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
}

#[test]
fn batch_norm_train_output_is_standardized() {
    let mut r = rng(5);
    let x = Tensor::from_fn(vec![4, 3, 5, 5], |i| 3.0 + 2.0 * ((i * 7919 % 101) as f64 / 50.0 - 1.0) + r.random_range(-0.5..0.5));
    let bn = BatchNorm2d::<f64>::new(3);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let y = bn.forward(&mut tape, xv, Mode::Train).unwrap();
    let out = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| out[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn batch_norm_degenerate_batch_is_an_error() {
    let bn = BatchNorm2d::<f64>::new(2);
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::zeros(vec![1, 2, 1, 1])).unwrap();
    assert!(matches!(bn.forward(&mut tape, xv, Mode::Train), Err(Error::DegenerateBatch(1))));
    // eval mode has no such restriction
    assert!(bn.forward(&mut tape, xv, Mode::Eval).is_ok());
}

#[test]
fn batch_norm_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(200 + trial);
        let inputs = [random(&[3, 2, 3, 3], &mut r), random(&[2], &mut r), random(&[2], &mut r)];
        let train = |tp: &mut Tape<f64>, v: &[sage::tensor::Var]| tp.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|r| r.0);
        let err = grad_check(train, &inputs, EPS);
        assert!(err < OP_TOL, "train trial {trial}: {err}");
        let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
        let eval = |tp: &mut Tape<f64>, v: &[sage::tensor::Var]| tp.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5);
        let err = grad_check(eval, &inputs, EPS);
        assert!(err < OP_TOL, "eval trial {trial}: {err}");
    }
}

#[test]
fn activation_trivial_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    let z = tape.constant(t(&[1], &[0.0])).unwrap();
    let th = tape.tanh(z).unwrap();
    assert_eq!(tape.value(th).data(), &[0.0]);
    let n = tape.constant(t(&[1], &[-1.0])).unwrap();
    let re = tape.relu(n).unwrap();
    assert_eq!(tape.value(re).data(), &[0.0]);
    assert!(matches!(tape.softmax(x, 1), Err(Error::Shape(_))));
}

#[test]
fn activation_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(300 + trial);
        let x = [random_off_zero(&[3, 4, 2], &mut r)];
        for (name, err) in [
            ("relu", grad_check(|tp, v| tp.relu(v[0]), &x, EPS)),
            ("tanh", grad_check(|tp, v| tp.tanh(v[0]), &x, EPS)),
            ("sigmoid", grad_check(|tp, v| tp.sigmoid(v[0]), &x, EPS)),
            ("softmax1", grad_check(|tp, v| tp.softmax(v[0], 1), &x, EPS)),
            ("softmax2", grad_check(|tp, v| tp.softmax(v[0], 2), &x, EPS)),
        ] {
            assert!(err < OP_TOL, "{name} trial {trial}: {err}");
        }
    }
}

#[test]
fn linear_trivial_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let w = tape.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
    let b = tape.constant(t(&[1], &[0.0])).unwrap();
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0]);

    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
    let zb = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
    let y = tape.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    assert!(matches!(tape.linear(x, b, None), Err(Error::Shape(_))));
}

#[test]
fn linear_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(400 + trial);
        let inputs = [random(&[3, 4], &mut r), random(&[4, 5], &mut r), random(&[5], &mut r)];
        let err = grad_check(|tp, v| tp.linear(v[0], v[1], Some(v[2])), &inputs, EPS);
        assert!(err < OP_TOL, "trial {trial}: {err}");
    }
}

#[test]
fn avg_pool_values_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2, 2], &[1.0, 3.0, 5.0, 7.0, 2.5, 2.5, 2.5, 2.5])).unwrap();
    let y = tape.adaptive_avg_pool_to_1(x).unwrap();
    assert_eq!(tape.shape(y), &[1, 2, 1, 1]);
    assert_eq!(tape.value(y).data(), &[4.0, 2.5]);

    let mut tape = Tape::<f64>::new();
    let x = tape.input(Tensor::zeros(vec![1, 1, 3, 2])).unwrap();
    let y = tape.adaptive_avg_pool_to_1(x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap().wrt(x).unwrap();
    assert!(g.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    for trial in 0..TRIALS {
        let mut r = rng(500 + trial);
        let err = grad_check(|tp, v| tp.adaptive_avg_pool_to_1(v[0]), &[random(&[2, 3, 3, 4], &mut r)], EPS);
        assert!(err < OP_TOL);
    }
}

/// Independent bilinear reference: half-pixel centers, edge clamping.
fn bilinear_reference(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sample = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let lo = s.floor().min((n_in - 1) as f64) as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::new();
    for oy in 0..oh {
        let (y0, y1, fy) = sample(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = sample(ox, w, ow);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

#[test]
fn bilinear_upsample_values() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(vec![1, 2, 3, 5], 0.7)).unwrap();
    let y = tape.bilinear_upsample(c, 8, 9).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let one = tape.constant(Tensor::full(vec![1, 1, 1, 1], 3.0)).unwrap();
    let y = tape.bilinear_upsample(one, 4, 4).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(vec![1, 1, 4, 4], 3.0));

    let src = [1.0, 2.0, 3.0, 4.0];
    let x = tape.constant(t(&[1, 1, 2, 2], &src)).unwrap();
    let y = tape.bilinear_upsample(x, 4, 4).unwrap();
    let want = bilinear_reference(&src, 2, 2, 4, 4);
    // first row is [1, 1.25, 1.75, 2]
    assert_eq!(&want[..4], &[1.0, 1.25, 1.75, 2.0]);
    for (a, b) in tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(tape.bilinear_upsample(x, 1, 4).is_err());
}

#[test]
fn bilinear_upsample_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(600 + trial);
        let err = grad_check(|tp, v| tp.bilinear_upsample(v[0], 8, 12), &[random(&[1, 2, 2, 3], &mut r)], EPS);
        assert!(err < OP_TOL);
    }
}

#[test]
fn l2_normalize_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 2, 2], &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
    let y = tape.l2_normalize_channels(x, 1e-8).unwrap();
    assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn l2_normalize_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(700 + trial);
        let err = grad_check(|tp, v| tp.l2_normalize_channels(v[0], 1e-8), &[random(&[2, 2, 3, 3], &mut r)], EPS);
        assert!(err < OP_TOL);
    }
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 4, 2, 2])).unwrap();
    let l = tape.cross_entropy(x, &[0, 1, 2, 3], None).unwrap();
    assert!((tape.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    assert!((tape.value(l).data()[0] - 1.3863).abs() < 1e-4);

    let mut logits = Tensor::<f32>::zeros(vec![1, 4, 1, 2]);
    logits.data_mut()[2] = 30.0; // class 1, pixel 0
    logits.data_mut()[7] = 30.0; // class 3, pixel 1
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(logits).unwrap();
    let l = tape.cross_entropy(x, &[1, 3], None).unwrap();
    assert!(tape.value(l).data()[0] < 1e-9);

    let l = tape.cross_entropy(x, &[1, 255], Some(255)).unwrap();
    assert!(tape.value(l).data()[0] < 1e-9);
    assert!(matches!(tape.cross_entropy(x, &[1, 4], None), Err(Error::Target(_))));
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(800 + trial);
        let target: Vec<usize> = (0..2 * 3 * 3).map(|i| (i * 7 + trial as usize) % 4).collect();
        let err = grad_check(|tp, v| tp.cross_entropy(v[0], &target, Some(2)), &[random(&[2, 4, 3, 3], &mut r)], EPS);
        assert!(err < OP_TOL);
    }
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    for trial in 0..TRIALS {
        let mut r = rng(900 + trial);
        let a = random(&[2, 1, 3], &mut r);
        let b = random(&[1, 4, 3], &mut r);
        assert!(grad_check(|tp, v| tp.add(v[0], v[1]), &[a.clone(), b.clone()], EPS) < OP_TOL);
        assert!(grad_check(|tp, v| tp.mul(v[0], v[1]), &[a.clone(), b.clone()], EPS) < OP_TOL);
        assert!(grad_check(|tp, v| tp.expand(v[0], &[2, 5, 3]), &[a.clone()], EPS) < OP_TOL);
        assert!(grad_check(|tp, v| tp.sum_dim(v[0], 1), &[b.clone()], EPS) < OP_TOL);
        assert!(grad_check(|tp, v| tp.narrow(v[0], 1, 1, 2), &[b.clone()], EPS) < OP_TOL);
        let sides = [
            random(&[2, 3, 2, 6], &mut r),
            random(&[2, 3, 2, 6], &mut r),
            random(&[2, 3, 3, 2], &mut r),
            random(&[2, 3, 3, 2], &mut r),
        ];
        assert!(grad_check(|tp, v| tp.assemble_border(v[0], v[1], v[2], v[3]), &sides, EPS) < OP_TOL);
    }
}

#[test]
fn backward_trivial_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
    let s = tape.sum(x).unwrap();
    assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let half = tape.scale(s, 0.5).unwrap();
    assert_eq!(tape.backward(half).unwrap().wrt(x).unwrap().data(), &[1.0, -2.0, 0.5]);

    assert!(matches!(tape.backward(sq), Err(Error::NonScalarLoss(_))));
}

#[test]
fn second_backward_accumulates_into_params() {
    let mut p = t(&[2], &[1.0, 2.0]).with_grad();
    let mut tape = Tape::<f64>::new();
    let pv = tape.leaf(&p).unwrap();
    let sq = tape.mul(pv, pv).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap().accumulate_into([&mut p]).unwrap();
    tape.backward(loss).unwrap().accumulate_into([&mut p]).unwrap();
    assert_eq!(p.grad().unwrap(), &[4.0, 8.0]);
}

#[test]
fn shared_parameter_gradients_sum_across_uses() {
    let p = t(&[1], &[3.0]).with_grad();
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(&p).unwrap();
    let b = tape.leaf(&p).unwrap();
    let y = tape.mul(a, b).unwrap();
    let loss = tape.sum(y).unwrap();
    assert_eq!(tape.backward(loss).unwrap().param(&p).unwrap(), &[6.0]);
}

#[test]
fn non_finite_outputs_abort() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1], &[1e300])).unwrap();
    assert!(matches!(tape.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    assert!(matches!(tape.constant(t(&[1], &[f64::NAN])), Err(Error::NonFinite { .. })));
}

fn composite_loss<R: sage::tensor::Real>(
    conv: &Conv2d<R>,
    bn: &BatchNorm2d<R>,
    head: &Linear<R>,
    x: &Tensor<R>,
    target: &[usize],
) -> (f64, Vec<f64>) {
    let mut tape = Tape::<R>::new();
    let xv = tape.constant(x.clone()).unwrap();
    let y = conv.forward(&mut tape, xv).unwrap();
    let y = bn.forward(&mut tape, y, Mode::Train).unwrap();
    let y = tape.relu(y).unwrap();
    let y = tape.adaptive_avg_pool_to_1(y).unwrap();
    let y = tape.reshape(y, &[2, 4]).unwrap();
    let y = head.forward(&mut tape, y).unwrap();
    let y = tape.reshape(y, &[2, 3, 1, 1]).unwrap();
    let l = tape.cross_entropy(y, target, None).unwrap();
    let g = tape.backward(l).unwrap();
    let gw = g.param(&conv.weight).unwrap().iter().map(|v| v.to_f64_lossy()).collect();
    (tape.value(l).data()[0].to_f64_lossy(), gw)
}

/// conv → bn → relu → pool → linear → CE: the f32 gradient against f64
/// central differences of the same network.
#[test]
fn composite_network_gradient_at_f32() {
    let mut r = rng(42);
    let mut conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, true, &mut r);
    conv.weight.set_requires_grad(true);
    let bn = BatchNorm2d::<f32>::new(4);
    let head = Linear::<f32>::new(4, 3, &mut r);
    let x = random(&[2, 3, 4, 4], &mut r);
    let target = [0usize, 2];

    let (_, analytic) = composite_loss(&conv, &bn, &head, &x.cast::<f32>(), &target);
    let (conv64, bn64, head64) = (conv.cast::<f64>(), bn.cast::<f64>(), head.cast::<f64>());
    let eps = 1e-5;
    let numeric: Vec<f64> = (0..conv64.weight.numel())
        .map(|j| {
            let mut plus = conv64.clone();
            plus.weight.data_mut()[j] += eps;
            let mut minus = conv64.clone();
            minus.weight.data_mut()[j] -= eps;
            let lp = composite_loss(&plus, &bn64, &head64, &x, &target).0;
            let lm = composite_loss(&minus, &bn64, &head64, &x, &target).0;
            (lp - lm) / (2.0 * eps)
        })
        .collect();
    let err = common::relative_error(&analytic, &numeric);
    assert!(err < 1e-2, "composite rel err {err}");
}

#[test]
fn op_sequences_are_bit_reproducible() {
    let run = || {
        let mut r = rng(11);
        let conv = Conv2d::<f32>::new(3, 8, 3, 2, 1, true, &mut r);
        let x = random(&[2, 3, 8, 8], &mut r).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let xv = tape.input(x).unwrap();
        let y = conv.forward(&mut tape, xv).unwrap();
        let y = tape.tanh(y).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap().wrt(xv).unwrap();
        (tape.value(y).clone(), g)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn l2_normalize_is_idempotent_with_unit_norms(vals in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 4)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![2, 3, 2, 2], vals).unwrap()).unwrap();
        let once = tape.l2_normalize_channels(x, 1e-8).unwrap();
        let twice = tape.l2_normalize_channels(once, 1e-8).unwrap();
        prop_assert!(tape.value(once).max_abs_diff(tape.value(twice)).unwrap() < 1e-6);
        for plane in tape.value(once).data().chunks(4) {
            let n = plane.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(n == 0.0 || (n - 1.0).abs() < 1e-5);
        }
    }
}
