use crate::error::{Error, Result};
use crate::oracle::OracleHandle;
use crate::spg::StylePromptGenerator;
use crate::tensor::{Real, Tape, Tensor, Var};

use super::encoder::SharedEncoder;
use super::fusion::{attention_scores, collect_prompts, encode_prompts, fuse_prompts, fusion_weights, FusionHeads};

/// Frozen generators, encoder and heads wired together.
#[derive(Clone, Copy, Debug)]
pub struct PromptFusion<'a, R: Real = f32> {
    pub generators: &'a [StylePromptGenerator<R>],
    pub encoder: &'a SharedEncoder<R>,
    pub heads: &'a FusionHeads<R>,
}

/// Tape handles of one fusion forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub prompts: Var,
    pub scores: Var,
    pub weights: Var,
    pub fused: Var,
}

/// Plain-tensor result of a fusion forward pass.
#[derive(Clone, Debug)]
pub struct FusedPrompt<R: Real = f32> {
    /// Normalized prompt stack B×n×C×H×W.
    pub prompts: Tensor<R>,
    /// Raw scores B×n.
    pub scores: Tensor<R>,
    /// Fusion weights B×n.
    pub weights: Tensor<R>,
    /// Fused prompt B×C×H×W.
    pub fused: Tensor<R>,
}

impl<'a, R: Real> PromptFusion<'a, R> {
    pub fn new(
        generators: &'a [StylePromptGenerator<R>],
        encoder: &'a SharedEncoder<R>,
        heads: &'a FusionHeads<R>,
    ) -> Result<Self> {
        let first = generators.first().ok_or_else(|| Error::Config("prompt fusion needs at least one generator".into()))?;
        let dims = |g: &StylePromptGenerator<R>| (g.spec.channels, g.spec.height, g.spec.width);
        if generators.iter().any(|g| dims(g) != dims(first)) {
            return Err(Error::shape("generators disagree on prompt dimensions"));
        }
        heads.check_encoder(encoder)?;
        Ok(PromptFusion { generators, encoder, heads })
    }

    pub fn len(&self) -> usize {
        self.generators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.generators.is_empty()
    }

    /// Which prompts are identical across a batch.
    pub fn input_independent(&self) -> Vec<bool> {
        self.generators.iter().map(|g| !g.variant().is_adaptive()).collect()
    }

    /// Records scores, weights and the fused prompt for `x` on `tape`.
    /// Only the head parameters are tracked.
    pub fn record(&self, tape: &mut Tape<R>, x: &Tensor<R>) -> Result<FusionVars> {
        let stack = collect_prompts(self.generators, x, self.heads.flags.normalization)?;
        let prompt_features = encode_prompts(self.encoder, &stack, &self.input_independent())?;
        let image_features = self.encoder.encode(x)?;
        let fx = tape.constant(image_features)?;
        let fp = tape.constant(prompt_features)?;
        let prompts = tape.constant(stack)?;
        let scores = attention_scores(tape, self.heads, fx, fp, self.len())?;
        let weights = fusion_weights(tape, scores, &self.heads.flags)?;
        let fused = fuse_prompts(tape, weights, prompts)?;
        Ok(FusionVars { prompts, scores, weights, fused })
    }

    pub fn fuse(&self, x: &Tensor<R>) -> Result<FusedPrompt<R>> {
        let mut tape = Tape::new();
        let v = self.record(&mut tape, x)?;
        Ok(FusedPrompt {
            prompts: tape.value(v.prompts).clone(),
            scores: tape.value(v.scores).clone(),
            weights: tape.value(v.weights).clone(),
            fused: tape.value(v.fused).clone(),
        })
    }

    /// `x + P_fused`.
    pub fn prompted(&self, x: &Tensor<R>) -> Result<Tensor<R>> {
        let fused = self.fuse(x)?.fused;
        let data = x.data().iter().zip(fused.data()).map(|(&a, &b)| a + b).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Predicted class mask B×H×W for `x`.
    pub fn infer(&self, x: &Tensor<R>, oracle: &OracleHandle<R>) -> Result<Vec<u8>> {
        oracle.predict_mask(&self.prompted(x)?)
    }
}
