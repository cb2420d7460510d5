//! Central finite-difference oracle shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sage::tensor::{Tape, Tensor, Var};
use sage::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for checks through ReLU kinks.
pub fn random_off_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Scalar objective: the op output contracted with fixed random weights,
/// so every output element contributes to the checked gradient.
fn objective(
    f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    weights_seed: u64,
) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let shape = tape.shape(out).to_vec();
    let mut r = rng(weights_seed);
    let w = Tensor::from_fn(shape, |_| r.random_range(0.5..1.5));
    let wv = tape.constant(w).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    (tape, vars, loss)
}

/// Largest norm-wise relative error between the tape gradient and central
/// differences, over all inputs.
pub fn grad_check(
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> f64 {
    let (tape, vars, loss) = objective(&f, inputs, 77);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].data_mut()[j] += delta;
                let (tape, _, loss) = objective(&f, &moved, 77);
                tape.value(loss).data()[0]
            };
            numeric[j] = (eval(eps) - eval(-eps)) / (2.0 * eps);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A 32×32 world with tiny budgets, for exercising the full pipeline.
pub fn tiny_config() -> sage::harness::ExperimentConfig {
    let mut cfg = sage::harness::ExperimentConfig::default();
    cfg.world.scene.height = 32;
    cfg.world.scene.width = 32;
    cfg.world.base_train = 48;
    cfg.world.base_val = 8;
    cfg.world.source_train = 16;
    cfg.world.val = 8;
    cfg.oracle.arch.channels = [4, 6, 8];
    cfg.oracle.pretrain.iters = 20;
    cfg.spg.hyper.iters = 4;
    cfg.spg.hyper.batch = 4;
    cfg.spg.pad = 4;
    cfg.spg.meta_iters = 2;
    cfg.apf.hyper.iters = 4;
    cfg.apf.hyper.batch = 4;
    cfg.eval_batch = 8;
    cfg.seeds = vec![0, 1];
    cfg
}
