use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{Error, Result};
use crate::tensor::nn::{join, Conv2d, ConvBnRelu, Mode, Module, TensorTable};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Encoder widths, kernel size and class count of the segmentation model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleArch {
    pub channels: [usize; 3],
    pub kernel: usize,
    pub classes: usize,
}

impl Default for OracleArch {
    fn default() -> Self {
        OracleArch { channels: [16, 32, 64], kernel: 5, classes: 6 }
    }
}

impl OracleArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.kernel == 0 || self.kernel % 2 == 0 || self.classes < 2 {
            return Err(Error::Config(format!("invalid oracle architecture {self:?}")));
        }
        Ok(())
    }

    /// Spatial reduction of the encoder.
    pub const STRIDE: usize = 8;
}

/// Checks a B×3×H×W input with H and W divisible by 8.
pub(crate) fn check_image_batch(shape: &[usize]) -> Result<()> {
    match shape {
        [b, 3, h, w] if *b > 0 && *h > 0 && *w > 0 && h % OracleArch::STRIDE == 0 && w % OracleArch::STRIDE == 0 => {
            Ok(())
        }
        _ => Err(Error::shape(format!("expected B×3×H×W with H, W divisible by 8, got {shape:?}"))),
    }
}

/// Three stride-2 conv-bn-relu stages, a 1×1 classifier and bilinear
/// upsampling back to the input resolution.
#[derive(Clone, Debug)]
pub struct SegModel<R: Real = f32> {
    pub stages: Vec<ConvBnRelu<R>>,
    pub head: Conv2d<R>,
    pub arch: OracleArch,
}

impl<R: Real> SegModel<R> {
    pub fn new(arch: &OracleArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut cin = 3;
        let mut stages = Vec::with_capacity(3);
        for &cout in &arch.channels {
            stages.push(ConvBnRelu::new(cin, cout, arch.kernel, 2, rng));
            cin = cout;
        }
        let head = Conv2d::new(cin, arch.classes, 1, 1, 0, true, rng);
        Ok(SegModel { stages, head, arch: arch.clone() })
    }

    /// Encoder output at 1/8 resolution.
    pub fn features(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        check_image_batch(tape.shape(x))?;
        self.stages.iter().try_fold(x, |h, stage| stage.forward(tape, h, mode))
    }

    /// Class logits at input resolution.
    pub fn forward(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let (h, w) = (tape.shape(x)[2], tape.shape(x)[3]);
        let f = self.features(tape, x, mode)?;
        let logits = self.head.forward(tape, f)?;
        tape.bilinear_upsample(logits, h, w)
    }

    pub fn cast<S: Real>(&self) -> SegModel<S> {
        SegModel { stages: self.stages.iter().map(ConvBnRelu::cast).collect(), head: self.head.cast(), arch: self.arch.clone() }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(Kind::Oracle);
        for (i, c) in self.arch.channels.iter().enumerate() {
            ckpt.put_scalar(&format!("meta.channels{i}"), *c as u32)?;
        }
        ckpt.put_scalar("meta.kernel", self.arch.kernel as u32)?;
        ckpt.put_scalar("meta.classes", self.arch.classes as u32)?;
        ckpt.extend(self.state_dict())?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Kind::Oracle {
            return Err(Error::KindMismatch { expected: "ORCL".into(), found: format!("{:?}", ckpt.kind) });
        }
        let dim = |name: &str| ckpt.scalar(name).map(|v| v as usize);
        let arch = OracleArch {
            channels: [dim("meta.channels0")?, dim("meta.channels1")?, dim("meta.channels2")?],
            kernel: dim("meta.kernel")?,
            classes: dim("meta.classes")?,
        };
        let mut model = SegModel::new(&arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let mut table = ckpt.table::<R>("");
        table.retain(|k, _| !k.starts_with("meta."));
        model.load_state("", &mut table)?;
        if let Some(extra) = table.keys().next() {
            return Err(Error::format(format!("unexpected tensor `{extra}` in oracle checkpoint")));
        }
        Ok(model)
    }
}

impl<R: Real> Module<R> for SegModel<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        let mut v: Vec<&Tensor<R>> = self.stages.iter().flat_map(|s| s.params()).collect();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v: Vec<&mut Tensor<R>> = self.stages.iter_mut().flat_map(|s| s.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.state(&join(prefix, &format!("stage{i}")), out);
        }
        self.head.state(&join(prefix, "head"), out);
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.load_state(&join(prefix, &format!("stage{i}")), table)?;
        }
        self.head.load_state(&join(prefix, "head"), table)
    }
}
