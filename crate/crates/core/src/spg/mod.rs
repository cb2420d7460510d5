//! Style-prompt generation: per-style generators that turn an image into
//! an additive prompt, trained through the oracle's input gradient.

mod generator;
mod modulator;
mod template;
mod train;

pub use generator::{attach_prompt, GeneratorSpec, StylePromptGenerator, Variant};
pub use modulator::{Modulator, ModulatorBlock};
pub use template::{BorderTemplate, InitStrategy, Template};
pub use train::{meta_pretrain, train_spg, SpgHyper};
