use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::write_dataset;
use super::scene::{render_scene, Sample, SceneSpec};
use super::style::{apply_style, StyleParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mixes a base seed with a tag into an independent stream seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(31);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn name_tag(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Scene seed of this split; train and val never share scenes.
    pub fn scene_seed(self, world_seed: u64) -> u64 {
        derive_seed(world_seed, match self {
            Split::Train => 0x7472_6169_6e00,
            Split::Val => 0x7661_6c00,
        })
    }
}

/// A named style distribution over procedurally rendered scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub scene: SceneSpec,
    pub style: StyleParams,
    pub jitter: StyleParams,
    pub count: usize,
    /// Seed of the scene stream. Domains built with the same split seed
    /// share scenes and masks.
    pub split_seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config(format!("domain {} has no samples", self.name)));
        }
        self.scene.validate()?;
        self.style.validate()
    }

    pub fn make(&self) -> Result<Dataset> {
        self.validate()?;
        let scene = SceneSpec { seed: self.split_seed, ..self.scene.clone() };
        let style_seed = derive_seed(self.split_seed, name_tag(&self.name));
        let mut samples = Vec::with_capacity(self.count);
        for i in 0..self.count as u64 {
            let base = render_scene(&scene, i);
            let stream = derive_seed(style_seed, i);
            let params = self.style.jittered(&self.jitter, &mut ChaCha8Rng::seed_from_u64(stream));
            let image = apply_style(&base.image, &params, derive_seed(stream, 1))?;
            samples.push(Sample { image, ..base });
        }
        Ok(Dataset { name: self.name.clone(), samples })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Stacks the chosen samples into a B×3×H×W batch and flat targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let picked: Vec<&Sample> = indices
            .iter()
            .map(|&i| self.samples.get(i).ok_or_else(|| Error::shape(format!("sample {i} out of {}", self.len()))))
            .collect::<Result<_>>()?;
        let images: Vec<&Tensor<f32>> = picked.iter().map(|s| &s.image).collect();
        let targets = picked.iter().flat_map(|s| s.mask.iter().map(|&c| c as usize)).collect();
        Ok((Tensor::stack(&images)?, targets))
    }

    /// SHA-256 of the dataset file encoding.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &self.samples)?;
        Ok(Sha256::digest(&bytes).into())
    }

    /// Mean RGB over every pixel of every sample.
    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for s in &self.samples {
            let plane = s.height() * s.width();
            for (c, a) in acc.iter_mut().enumerate() {
                *a += s.image.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            n += plane;
        }
        acc.map(|a| a / n.max(1) as f64)
    }
}

/// Draws index batches by walking seeded random permutations, one epoch
/// at a time.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("cannot sample batches from an empty dataset".into()));
        }
        Ok(BatchSampler { len, order: Vec::new(), pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.len).collect();
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}
