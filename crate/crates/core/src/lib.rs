//! Style-adaptive input prompts for frozen segmentation models.
//!
//! A sealed segmentation model exposes only predictions and input
//! gradients. Per-style prompt generators learn additive border prompts
//! through those gradients, and a cross-attention fusion step mixes the
//! prompts per image at inference time.

pub mod apf;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod oracle;
pub mod spg;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    mod checkpoints {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
