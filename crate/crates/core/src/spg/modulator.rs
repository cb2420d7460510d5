use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::nn::{join, BatchNorm2d, Conv2d, Mode, Module, TensorTable};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Residual block: `BN₂(Conv₂(ReLU(BN₁(Conv₁ x)))) + BNₛ(Convₛ x)` with a
/// stride-2 first conv and a stride-2 1×1 projection shortcut.
#[derive(Clone, Debug)]
pub struct ModulatorBlock<R: Real = f32> {
    pub conv1: Conv2d<R>,
    pub bn1: BatchNorm2d<R>,
    pub conv2: Conv2d<R>,
    pub bn2: BatchNorm2d<R>,
    pub shortcut: Conv2d<R>,
    pub shortcut_bn: BatchNorm2d<R>,
}

impl<R: Real> ModulatorBlock<R> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ModulatorBlock {
            conv1: Conv2d::new(cin, cout, 3, 2, 1, true, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, true, rng),
            bn2: BatchNorm2d::new(cout),
            shortcut: Conv2d::new(cin, cout, 1, 2, 0, true, rng),
            shortcut_bn: BatchNorm2d::new(cout),
        }
    }

    pub fn forward(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let main = self.conv1.forward(tape, x)?;
        let main = self.bn1.forward(tape, main, mode)?;
        let main = tape.relu(main)?;
        let main = self.conv2.forward(tape, main)?;
        let main = self.bn2.forward(tape, main, mode)?;
        let short = self.shortcut.forward(tape, x)?;
        let short = self.shortcut_bn.forward(tape, short, mode)?;
        tape.add(main, short)
    }

    pub fn cast<S: Real>(&self) -> ModulatorBlock<S> {
        ModulatorBlock {
            conv1: self.conv1.cast(),
            bn1: self.bn1.cast(),
            conv2: self.conv2.cast(),
            bn2: self.bn2.cast(),
            shortcut: self.shortcut.cast(),
            shortcut_bn: self.shortcut_bn.cast(),
        }
    }

    fn convs(&self) -> [(&'static str, &Conv2d<R>, &BatchNorm2d<R>); 3] {
        [("conv1", &self.conv1, &self.bn1), ("conv2", &self.conv2, &self.bn2), ("shortcut", &self.shortcut, &self.shortcut_bn)]
    }
}

impl<R: Real> Module<R> for ModulatorBlock<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        self.convs().into_iter().flat_map(|(_, c, b)| c.params().into_iter().chain(b.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.bn1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.shortcut.params_mut());
        v.extend(self.shortcut_bn.params_mut());
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        for (name, c, b) in self.convs() {
            c.state(&join(prefix, name), out);
            b.state(&join(prefix, &format!("{name}_bn")), out);
        }
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        for (name, c, b) in [
            ("conv1", &mut self.conv1, &mut self.bn1),
            ("conv2", &mut self.conv2, &mut self.bn2),
            ("shortcut", &mut self.shortcut, &mut self.shortcut_bn),
        ] {
            c.load_state(&join(prefix, name), table)?;
            b.load_state(&join(prefix, &format!("{name}_bn")), table)?;
        }
        Ok(())
    }
}

/// Three modulator blocks (widths d, 2d, 4d) and a 1×1 projection.
#[derive(Clone, Debug)]
pub struct Modulator<R: Real = f32> {
    pub blocks: Vec<ModulatorBlock<R>>,
    pub head: Conv2d<R>,
}

impl<R: Real> Modulator<R> {
    pub fn new(in_channels: usize, width: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let widths = [width, 2 * width, 4 * width];
        let mut cin = in_channels;
        let blocks = widths
            .iter()
            .map(|&w| {
                let b = ModulatorBlock::new(cin, w, rng);
                cin = w;
                b
            })
            .collect();
        Modulator { blocks, head: Conv2d::new(cin, out_channels, 1, 1, 0, true, rng) }
    }

    pub fn out_channels(&self) -> usize {
        self.head.out_channels()
    }

    /// Block features at 1/8 resolution, B×4d×H/8×W/8.
    pub fn features(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] % 8 != 0 || s[3] % 8 != 0 {
            return Err(Error::shape(format!("modulator input must be B×C×H×W with H, W divisible by 8, got {s:?}")));
        }
        self.blocks.iter().try_fold(x, |h, b| b.forward(tape, h, mode))
    }

    /// Projected map before pooling, B×out×H/8×W/8.
    pub fn projected(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let f = self.features(tape, x, mode)?;
        self.head.forward(tape, f)
    }

    /// Pooled global descriptor, B×out×1×1.
    pub fn pooled(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let p = self.projected(tape, x, mode)?;
        tape.adaptive_avg_pool_to_1(p)
    }

    pub fn cast<S: Real>(&self) -> Modulator<S> {
        Modulator { blocks: self.blocks.iter().map(ModulatorBlock::cast).collect(), head: self.head.cast() }
    }
}

impl<R: Real> Module<R> for Modulator<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        let mut v: Vec<&Tensor<R>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v: Vec<&mut Tensor<R>> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.state(&join(prefix, &format!("block{i}")), out);
        }
        self.head.state(&join(prefix, "head"), out);
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.load_state(&join(prefix, &format!("block{i}")), table)?;
        }
        self.head.load_state(&join(prefix, "head"), table)
    }
}
