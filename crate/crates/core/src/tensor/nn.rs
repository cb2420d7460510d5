//! Parameterized layers built on the tape operators.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Batch-norm ε.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named tensors used to load module state.
pub type TensorTable<R> = BTreeMap<String, Tensor<R>>;

pub trait Module<R: Real> {
    fn params(&self) -> Vec<&Tensor<R>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>>;

    /// Every persistent tensor, parameters and buffers alike.
    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>);

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Stops gradient flow into every parameter.
    fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.set_requires_grad(false));
    }

    fn state_dict(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = Vec::new();
        self.state("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Moves `name` out of `table` into `dst`, checking the shape and keeping
/// `dst`'s gradient flag.
pub(crate) fn take_into<R: Real>(table: &mut TensorTable<R>, name: &str, dst: &mut Tensor<R>) -> Result<()> {
    let src = table.remove(name).ok_or_else(|| Error::format(format!("missing tensor `{name}`")))?;
    if src.shape() != dst.shape() {
        return Err(Error::format(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    dst.data_mut().copy_from_slice(src.data());
    Ok(())
}

/// He-normal initialization for ReLU networks (fan-in mode).
pub fn kaiming_normal<R: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<R> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| R::from_f64_lossy(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv2d<R: Real = f32> {
    pub weight: Tensor<R>,
    pub bias: Option<Tensor<R>>,
    pub stride: usize,
    pub pad: usize,
}

impl<R: Real> Conv2d<R> {
    /// Kaiming-normal weights, zero bias.
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = kaiming_normal(vec![cout, cin, kernel, kernel], cin * kernel * kernel, rng).with_grad();
        let bias = bias.then(|| Tensor::zeros(vec![cout]).with_grad());
        Conv2d { weight, bias, stride, pad }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight)?;
        let b = self.bias.as_ref().map(|b| tape.leaf(b)).transpose()?;
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn cast<S: Real>(&self) -> Conv2d<S> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(Tensor::cast),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl<R: Real> Module<R> for Conv2d<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        take_into(table, &join(prefix, "weight"), &mut self.weight)?;
        if let Some(b) = &mut self.bias {
            take_into(table, &join(prefix, "bias"), b)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Running<R> {
    mean: Vec<R>,
    var: Vec<R>,
}

/// 2-D batch normalization with running statistics.
///
/// The statistics sit behind a mutex so that a shared model can run
/// eval-mode forwards from several threads while training updates stay
/// possible through `&self`.
#[derive(Debug)]
pub struct BatchNorm2d<R: Real = f32> {
    pub gamma: Tensor<R>,
    pub beta: Tensor<R>,
    running: Mutex<Running<R>>,
}

impl<R: Real> Clone for BatchNorm2d<R> {
    fn clone(&self) -> Self {
        BatchNorm2d {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running: Mutex::new(self.running_stats()),
        }
    }
}

impl<R: Real> BatchNorm2d<R> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(vec![channels], R::one()).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
            running: Mutex::new(Running { mean: vec![R::zero(); channels], var: vec![R::one(); channels] }),
        }
    }

    fn running_stats(&self) -> Running<R> {
        self.running.lock().expect("batch-norm stats lock").clone()
    }

    pub fn running_mean(&self) -> Vec<R> {
        self.running_stats().mean
    }

    pub fn running_var(&self) -> Vec<R> {
        self.running_stats().var
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.leaf(&self.gamma)?;
        let beta = tape.leaf(&self.beta)?;
        let eps = R::from_f64_lossy(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = R::from_f64_lossy(BN_MOMENTUM);
                let mut run = self.running.lock().expect("batch-norm stats lock");
                for (r, b) in run.mean.iter_mut().zip(&mean) {
                    *r = (R::one() - m) * *r + m * *b;
                }
                for (r, b) in run.var.iter_mut().zip(&var) {
                    *r = (R::one() - m) * *r + m * *b;
                }
                Ok(y)
            }
            Mode::Eval => {
                let run = self.running_stats();
                tape.batch_norm_eval(x, gamma, beta, &run.mean, &run.var, eps)
            }
        }
    }

    pub fn cast<S: Real>(&self) -> BatchNorm2d<S> {
        let run = self.running_stats();
        let conv = |v: &[R]| v.iter().map(|x| S::from_f64_lossy(x.to_f64_lossy())).collect();
        BatchNorm2d {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running: Mutex::new(Running { mean: conv(&run.mean), var: conv(&run.var) }),
        }
    }
}

impl<R: Real> Module<R> for BatchNorm2d<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        let run = self.running_stats();
        let c = run.mean.len();
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
        out.push((join(prefix, "running_mean"), Tensor::new(vec![c], run.mean).expect("length c")));
        out.push((join(prefix, "running_var"), Tensor::new(vec![c], run.var).expect("length c")));
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        take_into(table, &join(prefix, "gamma"), &mut self.gamma)?;
        take_into(table, &join(prefix, "beta"), &mut self.beta)?;
        let c = self.gamma.numel();
        let mut mean = Tensor::zeros(vec![c]);
        let mut var = Tensor::zeros(vec![c]);
        take_into(table, &join(prefix, "running_mean"), &mut mean)?;
        take_into(table, &join(prefix, "running_var"), &mut var)?;
        *self.running.get_mut().expect("batch-norm stats lock") =
            Running { mean: mean.into_data(), var: var.into_data() };
        Ok(())
    }
}

/// Fully connected layer, `weight` stored as `Din×Dout`.
#[derive(Clone, Debug)]
pub struct Linear<R: Real = f32> {
    pub weight: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Linear<R> {
    /// Uniform(±1/√Din) weights and bias.
    pub fn new(din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let mut draw = |_| R::from_f64_lossy(rng.random_range(-bound..bound));
        let weight = Tensor::from_fn(vec![din, dout], &mut draw).with_grad();
        let bias = Tensor::from_fn(vec![dout], &mut draw).with_grad();
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight)?;
        let b = tape.leaf(&self.bias)?;
        tape.linear(x, w, Some(b))
    }

    pub fn cast<S: Real>(&self) -> Linear<S> {
        Linear { weight: self.weight.cast(), bias: self.bias.cast() }
    }
}

impl<R: Real> Module<R> for Linear<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        take_into(table, &join(prefix, "weight"), &mut self.weight)?;
        take_into(table, &join(prefix, "bias"), &mut self.bias)
    }
}

/// Conv → BN → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu<R: Real = f32> {
    pub conv: Conv2d<R>,
    pub bn: BatchNorm2d<R>,
}

impl<R: Real> ConvBnRelu<R> {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvBnRelu { conv: Conv2d::new(cin, cout, kernel, stride, kernel / 2, true, rng), bn: BatchNorm2d::new(cout) }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        tape.relu(y)
    }

    pub fn cast<S: Real>(&self) -> ConvBnRelu<S> {
        ConvBnRelu { conv: self.conv.cast(), bn: self.bn.cast() }
    }
}

impl<R: Real> Module<R> for ConvBnRelu<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.conv.params_mut();
        v.extend(self.bn.params_mut());
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        self.conv.state(&join(prefix, "conv"), out);
        self.bn.state(&join(prefix, "bn"), out);
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        self.conv.load_state(&join(prefix, "conv"), table)?;
        self.bn.load_state(&join(prefix, "bn"), table)
    }
}
