//! Procedural segmentation scenes and analytic style transforms.
//!
//! Scenes are rendered in a neutral base palette with exact masks; styles
//! are deterministic pixel pipelines that never touch the mask, so every
//! stylized domain shares ground truth with the scenes it was built from.

mod domain;
mod io;
mod scene;
mod style;

pub use domain::{derive_seed, BatchSampler, Dataset, DomainSpec, Split};
pub use io::{masks_to_ppm, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use scene::{render_scene, Class, ObjectCounts, Sample, SceneSpec, BASE_PALETTE, NUM_CLASSES};
pub use style::{apply_style, style_presets, target_styles, StyleParams};
