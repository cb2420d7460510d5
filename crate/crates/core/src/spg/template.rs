use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{join, take_into, Module, TensorTable};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    Zero,
    Uniform,
    Normal,
    /// Normal initialization followed by a short per-style pretraining.
    Meta,
}

impl InitStrategy {
    pub const ALL: [InitStrategy; 4] = [InitStrategy::Zero, InitStrategy::Uniform, InitStrategy::Normal, InitStrategy::Meta];

    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Zero => "zero",
            InitStrategy::Uniform => "uniform",
            InitStrategy::Normal => "normal",
            InitStrategy::Meta => "meta",
        }
    }

    pub(crate) fn code(self) -> u32 {
        self as u32
    }

    pub(crate) fn from_code(code: u32) -> Result<Self> {
        Self::ALL.get(code as usize).copied().ok_or_else(|| Error::format(format!("unknown init code {code}")))
    }

    /// Fills a fresh parameter tensor. Meta starts from the normal draw.
    pub fn sample<R: Real>(self, shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<R> {
        let t = match self {
            InitStrategy::Zero => Tensor::zeros(shape),
            InitStrategy::Uniform => Tensor::from_fn(shape, |_| R::from_f64_lossy(rng.random_range(0.0..1.0))),
            InitStrategy::Normal | InitStrategy::Meta => {
                let n = Normal::new(0.0, 0.1).expect("valid sigma");
                Tensor::from_fn(shape, |_| R::from_f64_lossy(n.sample(rng)))
            }
        };
        t.with_grad()
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown init strategy `{s}`")))
    }
}

/// Learnable strips around a zero center. Top and bottom span the full
/// width and own the corners; left and right cover the middle rows.
#[derive(Clone, Debug)]
pub struct BorderTemplate<R: Real = f32> {
    /// 1×C×p×W
    pub top: Tensor<R>,
    pub bottom: Tensor<R>,
    /// 1×C×(H−2p)×p
    pub left: Tensor<R>,
    pub right: Tensor<R>,
    pub pad: usize,
}

impl<R: Real> BorderTemplate<R> {
    pub fn new(channels: usize, height: usize, width: usize, pad: usize, init: InitStrategy, rng: &mut impl Rng) -> Result<Self> {
        if pad == 0 || 2 * pad >= height || 2 * pad >= width {
            return Err(Error::Config(format!("pad {pad} does not fit a {height}x{width} canvas")));
        }
        let mid = height - 2 * pad;
        Ok(BorderTemplate {
            top: init.sample(vec![1, channels, pad, width], rng),
            bottom: init.sample(vec![1, channels, pad, width], rng),
            left: init.sample(vec![1, channels, mid, pad], rng),
            right: init.sample(vec![1, channels, mid, pad], rng),
            pad,
        })
    }

    pub fn sides(&self) -> [&Tensor<R>; 4] {
        [&self.top, &self.bottom, &self.left, &self.right]
    }

    pub fn channels(&self) -> usize {
        self.top.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.left.shape()[2] + 2 * self.pad
    }

    pub fn width(&self) -> usize {
        self.top.shape()[3]
    }

    /// Records the four sides on `tape` in t, b, l, r order.
    pub fn leaves(&self, tape: &mut Tape<R>) -> Result<[Var; 4]> {
        Ok([tape.leaf(&self.top)?, tape.leaf(&self.bottom)?, tape.leaf(&self.left)?, tape.leaf(&self.right)?])
    }

    pub fn cast<S: Real>(&self) -> BorderTemplate<S> {
        BorderTemplate { top: self.top.cast(), bottom: self.bottom.cast(), left: self.left.cast(), right: self.right.cast(), pad: self.pad }
    }
}

/// Either border strips or a full-size 1×C×H×W map.
#[derive(Clone, Debug)]
pub enum Template<R: Real = f32> {
    Border(BorderTemplate<R>),
    Full(Tensor<R>),
}

impl<R: Real> Template<R> {
    pub fn cast<S: Real>(&self) -> Template<S> {
        match self {
            Template::Border(b) => Template::Border(b.cast()),
            Template::Full(t) => Template::Full(t.cast()),
        }
    }

    /// Multiplies every template value by `s`.
    pub fn scale(&mut self, s: R) {
        for p in self.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
}

const SIDES: [&str; 4] = ["top", "bottom", "left", "right"];

impl<R: Real> Module<R> for Template<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        match self {
            Template::Border(b) => b.sides().to_vec(),
            Template::Full(t) => vec![t],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        match self {
            Template::Border(b) => vec![&mut b.top, &mut b.bottom, &mut b.left, &mut b.right],
            Template::Full(t) => vec![t],
        }
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        match self {
            Template::Border(b) => {
                for (name, t) in SIDES.iter().zip(b.sides()) {
                    out.push((join(prefix, name), t.clone()));
                }
            }
            Template::Full(t) => out.push((join(prefix, "full"), t.clone())),
        }
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        match self {
            Template::Border(b) => {
                for (name, t) in SIDES.iter().zip([&mut b.top, &mut b.bottom, &mut b.left, &mut b.right]) {
                    take_into(table, &join(prefix, name), t)?;
                }
                Ok(())
            }
            Template::Full(t) => take_into(table, &join(prefix, "full"), t),
        }
    }
}
