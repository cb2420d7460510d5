//! The frozen segmentation model and its sealed handle.
//!
//! [`SegModel`] is an ordinary trainable network. Once pretrained it is
//! sealed into an [`OracleHandle`], which answers prediction and
//! input-gradient queries but offers no route to the weights.

mod handle;
mod model;
mod pretrain;

pub use handle::{argmax_classes, OracleHandle};
pub use model::{OracleArch, SegModel};
pub use pretrain::{pretrain_oracle, PretrainHyper, Pretrained};
