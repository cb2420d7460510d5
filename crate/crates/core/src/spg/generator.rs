use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{Error, Result};
use crate::tensor::nn::{join, Mode, Module, TensorTable};
use crate::tensor::{Real, Tape, Tensor, Var};

use super::modulator::Modulator;
use super::template::{BorderTemplate, InitStrategy, Template};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fixed border prompt.
    Border,
    /// Border prompt reweighted per side and channel from the input.
    ABorder,
    /// Fixed full-size prompt.
    Full,
    /// Full-size prompt reweighted per pixel from the input.
    AFull,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Border, Variant::ABorder, Variant::Full, Variant::AFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Border => "border",
            Variant::ABorder => "a-border",
            Variant::Full => "full",
            Variant::AFull => "a-full",
        }
    }

    /// Display label in tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Border => "Border",
            Variant::ABorder => "A-Border",
            Variant::Full => "Full",
            Variant::AFull => "A-Full",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Variant::ABorder | Variant::AFull)
    }

    pub fn is_border(self) -> bool {
        matches!(self, Variant::Border | Variant::ABorder)
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(code: u32) -> Result<Self> {
        Self::ALL.get(code as usize).copied().ok_or_else(|| Error::format(format!("unknown variant code {code}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('-', "") == s)
            .ok_or_else(|| Error::Config(format!("unknown generator variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub variant: Variant,
    pub init: InitStrategy,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pad: usize,
    /// Width `d` of the first modulator block.
    pub modulator_width: usize,
    /// Squash coefficients with a sigmoid instead of using them raw.
    #[serde(default)]
    pub sigmoid_alpha: bool,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self;
        if s.channels == 0 || s.height % 8 != 0 || s.width % 8 != 0 || s.height == 0 || s.width == 0 {
            return Err(Error::Config(format!("generator dims {}x{}x{} must be divisible by 8", s.channels, s.height, s.width)));
        }
        if s.variant.is_border() && (s.pad == 0 || 2 * s.pad >= s.height.min(s.width)) {
            return Err(Error::Config(format!("border width {} does not fit a {}x{} canvas", s.pad, s.height, s.width)));
        }
        if s.variant.is_adaptive() && s.modulator_width == 0 {
            return Err(Error::Config("modulator width must be positive".into()));
        }
        Ok(())
    }
}

/// Template plus optional modulation network for one style.
#[derive(Clone, Debug)]
pub struct StylePromptGenerator<R: Real = f32> {
    pub spec: GeneratorSpec,
    pub style: usize,
    pub template: Template<R>,
    pub modulator: Option<Modulator<R>>,
}

impl<R: Real> StylePromptGenerator<R> {
    pub fn new(spec: &GeneratorSpec, style: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let s = spec;
        let template = if s.variant.is_border() {
            Template::Border(BorderTemplate::new(s.channels, s.height, s.width, s.pad, s.init, rng)?)
        } else {
            Template::Full(s.init.sample(vec![1, s.channels, s.height, s.width], rng))
        };
        let modulator = match s.variant {
            Variant::ABorder => Some(Modulator::new(s.channels, s.modulator_width, 4 * s.channels, rng)),
            Variant::AFull => Some(Modulator::new(s.channels, s.modulator_width, s.channels, rng)),
            Variant::Border | Variant::Full => None,
        };
        Ok(StylePromptGenerator { spec: spec.clone(), style, template, modulator })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    fn check_input(&self, tape: &Tape<R>, x: Var) -> Result<usize> {
        match *tape.shape(x) {
            [b, c, h, w] if c == self.spec.channels && h == self.spec.height && w == self.spec.width => Ok(b),
            ref s => Err(Error::shape(format!(
                "generator expects B×{}×{}×{}, got {s:?}",
                self.spec.channels, self.spec.height, self.spec.width
            ))),
        }
    }

    fn squash(&self, tape: &mut Tape<R>, v: Var) -> Result<Var> {
        if self.spec.sigmoid_alpha {
            tape.sigmoid(v)
        } else {
            Ok(v)
        }
    }

    /// Per-side, per-channel coefficients B×4×C in t, b, l, r order
    /// (A-Border only).
    pub fn alpha(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let b = self.check_input(tape, x)?;
        let m = match (&self.modulator, self.spec.variant) {
            (Some(m), Variant::ABorder) => m,
            _ => return Err(Error::Config(format!("{} generators have no side coefficients", self.spec.variant))),
        };
        let pooled = m.pooled(tape, x, mode)?;
        let flat = tape.reshape(pooled, &[b, 4, self.spec.channels])?;
        self.squash(tape, flat)
    }

    /// Modulated border sides `P ⊙ α` (A-Border only).
    pub fn modulated_sides(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<[Var; 4]> {
        let alpha = self.alpha(tape, x, mode)?;
        let Template::Border(t) = &self.template else { unreachable!("A-Border always holds a border template") };
        let sides = t.leaves(tape)?;
        let b = tape.shape(x)[0];
        let c = self.spec.channels;
        let mut out = sides;
        for (k, side) in sides.into_iter().enumerate() {
            let a = tape.narrow(alpha, 1, k, 1)?;
            let a = tape.reshape(a, &[b, c, 1, 1])?;
            out[k] = tape.mul(side, a)?;
        }
        Ok(out)
    }

    /// Prompt B×C×H×W for the batch `x`.
    pub fn generate(&self, tape: &mut Tape<R>, x: Var, mode: Mode) -> Result<Var> {
        let b = self.check_input(tape, x)?;
        let full_shape = [b, self.spec.channels, self.spec.height, self.spec.width];
        match (&self.template, self.spec.variant) {
            (Template::Border(t), Variant::Border) => {
                let [top, bottom, left, right] = t.leaves(tape)?;
                let p = tape.assemble_border(top, bottom, left, right)?;
                tape.expand(p, &full_shape)
            }
            (Template::Border(_), Variant::ABorder) => {
                let [top, bottom, left, right] = self.modulated_sides(tape, x, mode)?;
                tape.assemble_border(top, bottom, left, right)
            }
            (Template::Full(t), Variant::Full) => {
                let p = tape.leaf(t)?;
                tape.expand(p, &full_shape)
            }
            (Template::Full(t), Variant::AFull) => {
                let m = self.modulator.as_ref().expect("A-Full holds a modulator");
                let map = m.projected(tape, x, mode)?;
                let map = tape.bilinear_upsample(map, self.spec.height, self.spec.width)?;
                let map = self.squash(tape, map)?;
                let p = tape.leaf(t)?;
                tape.mul(p, map)
            }
            _ => unreachable!("template kind follows the variant"),
        }
    }

    /// Eval-mode prompt as a plain tensor.
    pub fn prompt(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let p = self.generate(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(p).clone())
    }

    pub fn cast<S: Real>(&self) -> StylePromptGenerator<S> {
        StylePromptGenerator {
            spec: self.spec.clone(),
            style: self.style,
            template: self.template.cast(),
            modulator: self.modulator.as_ref().map(Modulator::cast),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let s = &self.spec;
        let mut ckpt = Checkpoint::new(Kind::Generator);
        ckpt.put_scalar("meta.variant", s.variant.code())?;
        ckpt.put_scalar("meta.init", s.init.code())?;
        ckpt.put_scalar("meta.style", self.style as u32)?;
        ckpt.put_scalar("meta.channels", s.channels as u32)?;
        ckpt.put_scalar("meta.height", s.height as u32)?;
        ckpt.put_scalar("meta.width", s.width as u32)?;
        ckpt.put_scalar("meta.pad", s.pad as u32)?;
        ckpt.put_scalar("meta.modulator_width", s.modulator_width as u32)?;
        ckpt.put_scalar("meta.sigmoid_alpha", s.sigmoid_alpha as u32)?;
        ckpt.extend(self.state_dict())?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != Kind::Generator {
            return Err(Error::KindMismatch { expected: "SPGN".into(), found: format!("{:?}", ckpt.kind) });
        }
        let n = |name: &str| ckpt.scalar(name).map(|v| v as usize);
        let spec = GeneratorSpec {
            variant: Variant::from_code(ckpt.scalar("meta.variant")?)?,
            init: InitStrategy::from_code(ckpt.scalar("meta.init")?)?,
            channels: n("meta.channels")?,
            height: n("meta.height")?,
            width: n("meta.width")?,
            pad: n("meta.pad")?,
            modulator_width: n("meta.modulator_width")?,
            sigmoid_alpha: ckpt.scalar("meta.sigmoid_alpha")? != 0,
        };
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut g = StylePromptGenerator::new(&spec, n("meta.style")?, &mut rng)?;
        let mut table = ckpt.table::<R>("");
        table.retain(|k, _| !k.starts_with("meta."));
        g.load_state("", &mut table)?;
        if let Some(extra) = table.keys().next() {
            return Err(Error::format(format!("unexpected tensor `{extra}` in generator checkpoint")));
        }
        Ok(g)
    }
}

impl<R: Real> Module<R> for StylePromptGenerator<R> {
    fn params(&self) -> Vec<&Tensor<R>> {
        let mut v = self.template.params();
        if let Some(m) = &self.modulator {
            v.extend(m.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut v = self.template.params_mut();
        if let Some(m) = &mut self.modulator {
            v.extend(m.params_mut());
        }
        v
    }

    fn state(&self, prefix: &str, out: &mut Vec<(String, Tensor<R>)>) {
        self.template.state(&join(prefix, "template"), out);
        if let Some(m) = &self.modulator {
            m.state(&join(prefix, "modulator"), out);
        }
    }

    fn load_state(&mut self, prefix: &str, table: &mut TensorTable<R>) -> Result<()> {
        self.template.load_state(&join(prefix, "template"), table)?;
        if let Some(m) = &mut self.modulator {
            m.load_state(&join(prefix, "modulator"), table)?;
        }
        Ok(())
    }
}

/// `x + P`, unclamped.
pub fn attach_prompt<R: Real>(tape: &mut Tape<R>, x: Var, prompt: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(prompt) {
        return Err(Error::shape(format!("prompt {:?} does not match image {:?}", tape.shape(prompt), tape.shape(x))));
    }
    tape.add(x, prompt)
}
