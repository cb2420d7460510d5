use rand::{Rng, SeedableRng};

use crate::checkpoint::{fingerprint_of, state_digest, Checkpoint, Kind};
use crate::error::{Error, Result};
use crate::oracle::{OracleArch, SegModel};
use crate::tensor::nn::{join, ConvBnRelu, Mode, Module, TensorTable};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Frozen feature extractor shared by images and prompts: three stride-2
/// conv-bn-relu stages and a global average pool, giving one `D`-vector
/// per input.
#[derive(Clone, Debug)]
pub struct SharedEncoder<R: Real = f32> {
    stages: Vec<ConvBnRelu<R>>,
    arch: OracleArch,
}

impl<R: Real> SharedEncoder<R> {
    /// Copies the encoder stages of a pretrained segmentation model.
    pub fn from_model(model: &SegModel<R>) -> Self {
        let mut enc = SharedEncoder { stages: model.stages.clone(), arch: model.arch.clone() };
        enc.freeze();
        enc
    }

    /// Randomly initialized stages with default running statistics.
    pub fn random(arch: &OracleArch, rng: &mut impl Rng) -> Result<Self> {
        let model = SegModel::new(arch, rng)?;
        Ok(Self::from_model(&model))
    }

    /// Feature width `D`.
    pub fn dim(&self) -> usize {
        self.arch.channels[2]
    }

    pub fn arch(&self) -> &OracleArch {
        &self.arch
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(&state_digest(&self.state_dict()))
    }

    /// Eval-mode features B×D recorded on `tape` (no parameter gradients).
    pub fn forward(&self, tape: &mut Tape<R>, x: Var) -> Result<Var> {
        let b = tape.shape(x)[0];
        let h = self.stages.iter().try_fold(x, |h, s| s.forward(tape, h, Mode::Eval))?;
        let pooled = tape.adaptive_avg_pool_to_1(h)?;
        tape.reshape(pooled, &[b, self.dim()])
    }

    /// Features B×D of a plain image batch.
    pub fn encode(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let f = self.forward(&mut tape, xv)?;
        Ok(tape.value(f).clone())
    }

    pub fn cast<S: Real>(&self) -> SharedEncoder<S> {
        SharedEncoder { stages: self.stages.iter().map(ConvBnRelu::cast).collect(), arch: self.arch.clone() }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(Kind::Encoder);
        for (i, c) in self.arch.channels.iter().enumerate() {
            ckpt.put_scalar(&format!("meta.channels{i}"), *c as u32)?;
        }
        ckpt.put_scalar("meta.kernel", self.arch.kernel as u32)?;
        ckpt.extend(self.state_dict())?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Kind::Encoder {
            return Err(Error::KindMismatch { expected: "ENCD".into(), found: format!("{:?}", ckpt.kind) });
        }
        let dim = |name: &str| ckpt.scalar(name).map(|v| v as usize);
        let arch = OracleArch {
            channels: [dim("meta.channels0")?, dim("meta.channels1")?, dim("meta.channels2")?],
            kernel: dim("meta.kernel")?,
            classes: 2,
        };
        let mut enc = Self::random(&arch, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let mut table = ckpt.table::<R>("");
        table.retain(|k, _| !k.starts_with("meta."));
        enc.load_state("", &mut table)?;
        if let Some(extra) = table.keys().next() {
            return Err(Error::format(format!("unexpected tensor `{extra}` in encoder checkpoint")));
        }
        Ok(enc)
    }
}

impl<R: Real> Module<R> for SharedEncoder<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        self.stages.iter_mut().flat_map(|s| s.params_mut()).collect()
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        for (i, s) in self.stages.iter().enumerate() {
            s.state(&join(prefix, &format!("stage{i}")), out);
        }
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.load_state(&join(prefix, &format!("stage{i}")), table)?;
        }
        Ok(())
    }
}
