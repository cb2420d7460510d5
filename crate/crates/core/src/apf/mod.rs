//! Adaptive prompt fusion: normalized style prompts are scored against the
//! input through a frozen shared encoder and two trainable projections,
//! then mixed with `tanh(softmax(·))` weights.

mod encoder;
mod fusion;
mod infer;
mod train;

pub use encoder::SharedEncoder;
pub use fusion::{
    attention_scores, collect_prompts, encode_prompts, fuse_prompts, fusion_weights, normalize_prompts, stack_prompts,
    FusionFlags, FusionHeads, Normalization, NORM_EPS,
};
pub use infer::{FusedPrompt, FusionVars, PromptFusion};
pub use train::{train_apf, ApfHyper};
