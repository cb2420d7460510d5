use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{Error, Result};
use crate::spg::StylePromptGenerator;
use crate::tensor::nn::{join, Linear, Module, TensorTable};
use crate::tensor::{Real, Tape, Tensor, Var};

use super::encoder::SharedEncoder;

/// Guard for all-zero prompt planes.
pub const NORM_EPS: f64 = 1e-8;

/// How each style prompt is rescaled before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Unit L2 norm per (sample, channel) plane.
    #[default]
    PerChannel,
    /// Unit L2 norm per whole C×H×W prompt.
    WholeTensor,
    None,
}

impl Normalization {
    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(code: u32) -> Result<Self> {
        [Normalization::PerChannel, Normalization::WholeTensor, Normalization::None]
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::format(format!("unknown normalization code {code}")))
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::PerChannel => "per-channel",
            Normalization::WholeTensor => "whole-tensor",
            Normalization::None => "none",
        })
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-channel" => Ok(Normalization::PerChannel),
            "whole-tensor" => Ok(Normalization::WholeTensor),
            "none" => Ok(Normalization::None),
            _ => Err(Error::Config(format!("unknown normalization `{s}`"))),
        }
    }
}

/// Which fusion components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FusionFlags {
    pub normalization: Normalization,
    pub softmax: bool,
    pub tanh: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        FusionFlags { normalization: Normalization::PerChannel, softmax: true, tanh: true }
    }
}

impl FusionFlags {
    /// The eight on/off combinations of normalization, softmax and tanh,
    /// all-off first.
    pub fn grid() -> Vec<FusionFlags> {
        (0..8u8)
            .map(|bits| FusionFlags {
                normalization: if bits & 4 != 0 { Normalization::PerChannel } else { Normalization::None },
                softmax: bits & 2 != 0,
                tanh: bits & 1 != 0,
            })
            .collect()
    }

    pub fn label(&self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!("pn={} softmax={} tanh={}", self.normalization, on(self.softmax), on(self.tanh))
    }
}

/// Trainable query and key projections.
#[derive(Clone, Debug)]
pub struct FusionHeads<R: Real = f32> {
    pub wx: Linear<R>,
    pub wp: Linear<R>,
    pub flags: FusionFlags,
    /// Fingerprint of the encoder these heads were built against.
    pub encoder_fingerprint: u64,
}

impl<R: Real> FusionHeads<R> {
    pub fn new(encoder: &SharedEncoder<R>, embed_dim: usize, flags: FusionFlags, rng: &mut impl Rng) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::Config("fusion embedding width must be positive".into()));
        }
        let d = encoder.dim();
        Ok(FusionHeads {
            wx: Linear::new(d, embed_dim, rng),
            wp: Linear::new(d, embed_dim, rng),
            flags,
            encoder_fingerprint: encoder.fingerprint(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.wx.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.wx.weight.shape()[1]
    }

    pub fn check_encoder(&self, encoder: &SharedEncoder<R>) -> Result<()> {
        if encoder.fingerprint() != self.encoder_fingerprint || encoder.dim() != self.input_dim() {
            return Err(Error::Config(format!(
                "fusion heads were trained against encoder {:016x}, got {:016x}",
                self.encoder_fingerprint,
                encoder.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn cast<S: Real>(&self) -> FusionHeads<S> {
        FusionHeads { wx: self.wx.cast(), wp: self.wp.cast(), flags: self.flags, encoder_fingerprint: self.encoder_fingerprint }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(Kind::Heads);
        ckpt.put_scalar("meta.input_dim", self.input_dim() as u32)?;
        ckpt.put_scalar("meta.embed_dim", self.embed_dim() as u32)?;
        ckpt.put_scalar("meta.normalization", self.flags.normalization.code())?;
        ckpt.put_scalar("meta.softmax", self.flags.softmax as u32)?;
        ckpt.put_scalar("meta.tanh", self.flags.tanh as u32)?;
        ckpt.put_u64("meta.encoder_fingerprint", self.encoder_fingerprint)?;
        ckpt.extend(self.state_dict())?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Kind::Heads {
            return Err(Error::KindMismatch { expected: "APFH".into(), found: format!("{:?}", ckpt.kind) });
        }
        let (d, de) = (ckpt.scalar("meta.input_dim")? as usize, ckpt.scalar("meta.embed_dim")? as usize);
        let flags = FusionFlags {
            normalization: Normalization::from_code(ckpt.scalar("meta.normalization")?)?,
            softmax: ckpt.scalar("meta.softmax")? != 0,
            tanh: ckpt.scalar("meta.tanh")? != 0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut heads = FusionHeads {
            wx: Linear::new(d, de, &mut rng),
            wp: Linear::new(d, de, &mut rng),
            flags,
            encoder_fingerprint: ckpt.u64("meta.encoder_fingerprint")?,
        };
        let mut table = ckpt.table::<R>("");
        table.retain(|k, _| !k.starts_with("meta."));
        heads.load_state("", &mut table)?;
        if let Some(extra) = table.keys().next() {
            return Err(Error::format(format!("unexpected tensor `{extra}` in heads checkpoint")));
        }
        Ok(heads)
    }
}

impl<R: Real> Module<R> for FusionHeads<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        let mut v = self.wx.params();
        v.extend(self.wp.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.wx.params_mut();
        v.extend(self.wp.params_mut());
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        self.wx.state(&join(prefix, "wx"), out);
        self.wp.state(&join(prefix, "wp"), out);
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        self.wx.load_state(&join(prefix, "wx"), table)?;
        self.wp.load_state(&join(prefix, "wp"), table)
    }
}

/// Runs every generator on `x` (eval mode) and stacks the normalized
/// prompts into B×n×C×H×W.
pub fn collect_prompts<R: Real>(
    generators: &[StylePromptGenerator<R>],
    x: &Tensor<R>,
    normalization: Normalization,
) -> Result<Tensor<R>> {
    if generators.is_empty() {
        return Err(Error::Config("prompt fusion needs at least one generator".into()));
    }
    let prompts = generators.iter().map(|g| g.prompt(x)).collect::<Result<Vec<_>>>()?;
    let stacked = stack_prompts(&prompts)?;
    normalize_prompts(&stacked, normalization)
}

/// Interleaves n prompts of shape B×C×H×W into B×n×C×H×W.
pub fn stack_prompts<R: Real>(prompts: &[Tensor<R>]) -> Result<Tensor<R>> {
    let first = prompts.first().ok_or_else(|| Error::Config("no prompts to stack".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 4 || prompts.iter().any(|p| p.shape() != s.as_slice()) {
        return Err(Error::shape("prompts must share one B×C×H×W shape"));
    }
    let (b, plane) = (s[0], s[1] * s[2] * s[3]);
    let mut data = Vec::with_capacity(b * prompts.len() * plane);
    for n in 0..b {
        for p in prompts {
            data.extend_from_slice(&p.data()[n * plane..(n + 1) * plane]);
        }
    }
    Tensor::new(vec![b, prompts.len(), s[1], s[2], s[3]], data)
}

/// Normalizes a B×n×C×H×W prompt stack.
pub fn normalize_prompts<R: Real>(stack: &Tensor<R>, normalization: Normalization) -> Result<Tensor<R>> {
    let s = stack.shape();
    if s.len() != 5 {
        return Err(Error::shape(format!("expected a B×n×C×H×W prompt stack, got {s:?}")));
    }
    let group = match normalization {
        Normalization::PerChannel => s[3] * s[4],
        Normalization::WholeTensor => s[2] * s[3] * s[4],
        Normalization::None => return Ok(stack.clone()),
    };
    let mut tape = Tape::new();
    let v = tape.constant(stack.clone())?;
    let out = tape.l2_normalize_groups(v, group, R::from_f64_lossy(NORM_EPS))?;
    Ok(tape.value(out).clone())
}

/// Encoder features of every prompt in the stack, (B·n)×D. Prompts of
/// input-independent generators are encoded once and reused across the
/// batch.
pub fn encode_prompts<R: Real>(encoder: &SharedEncoder<R>, stack: &Tensor<R>, shared: &[bool]) -> Result<Tensor<R>> {
    let s = stack.shape();
    let (b, n, plane) = (s[0], s[1], s[2] * s[3] * s[4]);
    if shared.len() != n {
        return Err(Error::shape(format!("{} sharing flags for {n} prompts", shared.len())));
    }
    let d = encoder.dim();
    let mut out = vec![R::zero(); b * n * d];
    let mut fresh = Vec::new();
    for i in 0..n {
        let rows = if shared[i] { 1 } else { b };
        for bi in 0..rows {
            fresh.push((bi, i));
        }
    }
    let mut data = Vec::with_capacity(fresh.len() * plane);
    for &(bi, i) in &fresh {
        data.extend_from_slice(&stack.data()[(bi * n + i) * plane..][..plane]);
    }
    let batch = Tensor::new(vec![fresh.len(), s[2], s[3], s[4]], data)?;
    let feats = encoder.encode(&batch)?;
    for (row, &(bi, i)) in fresh.iter().enumerate() {
        let f = &feats.data()[row * d..][..d];
        let targets: Vec<usize> = if shared[i] { (0..b).collect() } else { vec![bi] };
        for t in targets {
            out[(t * n + i) * d..][..d].copy_from_slice(f);
        }
    }
    Tensor::new(vec![b * n, d], out)
}

/// Scores `A[b, i] = ⟨W_x f_x[b], W_p f_p[b, i]⟩`, B×n.
pub fn attention_scores<R: Real>(
    tape: &mut Tape<R>,
    heads: &FusionHeads<R>,
    image_features: Var,
    prompt_features: Var,
    n: usize,
) -> Result<Var> {
    let b = tape.shape(image_features)[0];
    if n == 0 || tape.shape(prompt_features)[0] != b * n {
        return Err(Error::shape(format!("{:?} prompt features for batch {b} and {n} prompts", tape.shape(prompt_features))));
    }
    let de = heads.embed_dim();
    let query = heads.wx.forward(tape, image_features)?;
    let query = tape.reshape(query, &[b, 1, de])?;
    let keys = heads.wp.forward(tape, prompt_features)?;
    let keys = tape.reshape(keys, &[b, n, de])?;
    let prod = tape.mul(query, keys)?;
    tape.sum_dim(prod, 2)
}

/// `tanh(softmax(A))` over the prompt axis, with either step switchable.
pub fn fusion_weights<R: Real>(tape: &mut Tape<R>, scores: Var, flags: &FusionFlags) -> Result<Var> {
    let w = if flags.softmax { tape.softmax(scores, 1)? } else { scores };
    if flags.tanh {
        tape.tanh(w)
    } else {
        Ok(w)
    }
}

/// `Σᵢ w[:, i] · P[:, i]`, B×C×H×W.
pub fn fuse_prompts<R: Real>(tape: &mut Tape<R>, weights: Var, prompts: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    let ps = tape.shape(prompts).to_vec();
    if ws.len() != 2 || ps.len() != 5 || ws[0] != ps[0] || ws[1] != ps[1] {
        return Err(Error::shape(format!("weights {ws:?} do not match prompt stack {ps:?}")));
    }
    let w = tape.reshape(weights, &[ws[0], ws[1], 1, 1, 1])?;
    let weighted = tape.mul(prompts, w)?;
    tape.sum_dim(weighted, 1)
}
