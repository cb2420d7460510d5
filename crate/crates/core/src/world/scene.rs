use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::domain::derive_seed;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Road = 1,
    Building = 2,
    Sign = 3,
    Tree = 4,
    Lane = 5,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] =
        [Class::Background, Class::Road, Class::Building, Class::Sign, Class::Tree, Class::Lane];

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Road => "road",
            Class::Building => "building",
            Class::Sign => "sign",
            Class::Tree => "tree",
            Class::Lane => "lane",
        }
    }
}

/// Neutral RGB color of each class in the base style.
pub const BASE_PALETTE: [[f32; 3]; NUM_CLASSES] = [
    [0.60, 0.62, 0.66],
    [0.30, 0.30, 0.32],
    [0.66, 0.45, 0.34],
    [0.86, 0.20, 0.20],
    [0.20, 0.55, 0.26],
    [0.95, 0.93, 0.84],
];

/// Inclusive object-count ranges per drawn class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub buildings: (u32, u32),
    pub trees: (u32, u32),
    pub signs: (u32, u32),
    pub lane_dashes: (u32, u32),
}

impl Default for ObjectCounts {
    fn default() -> Self {
        ObjectCounts { buildings: (1, 3), trees: (1, 3), signs: (1, 2), lane_dashes: (2, 4) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    #[serde(default)]
    pub counts: ObjectCounts,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { seed: 0, height: 64, width: 64, classes: NUM_CLASSES, counts: ObjectCounts::default() }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!("canvas {}x{} is too small", self.height, self.width)));
        }
        if !(2..=NUM_CLASSES).contains(&self.classes) {
            return Err(Error::Config(format!("class count must be in 2..={NUM_CLASSES}, got {}", self.classes)));
        }
        let c = &self.counts;
        for (name, (lo, hi)) in
            [("buildings", c.buildings), ("trees", c.trees), ("signs", c.signs), ("lane_dashes", c.lane_dashes)]
        {
            if lo > hi {
                return Err(Error::Config(format!("{name} count range {lo}..={hi} is empty")));
            }
        }
        Ok(())
    }
}

/// One image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// 3×H×W, values in [0, 1].
    pub image: Tensor<f32>,
    /// H×W class indices.
    pub mask: Vec<u8>,
    pub classes: usize,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

struct Canvas {
    h: usize,
    w: usize,
    classes: usize,
    mask: Vec<u8>,
    color: Vec<[f32; 3]>,
}

impl Canvas {
    fn paint(&mut self, class: Class, tint: [f32; 3], inside: impl Fn(f32, f32) -> bool) {
        if class as usize >= self.classes {
            return;
        }
        for y in 0..self.h {
            for x in 0..self.w {
                if inside(y as f32 + 0.5, x as f32 + 0.5) {
                    self.mask[y * self.w + x] = class as u8;
                    self.color[y * self.w + x] = tint;
                }
            }
        }
    }
}

fn jittered(class: Class, rng: &mut ChaCha8Rng) -> [f32; 3] {
    BASE_PALETTE[class as usize].map(|c| c + rng.random_range(-0.04..0.04))
}

fn count(range: (u32, u32), rng: &mut ChaCha8Rng) -> u32 {
    rng.random_range(range.0..=range.1)
}

/// Renders scene `index` of `spec` in the base style.
///
/// Painter's order: background, road band, buildings, trees, signs, lane
/// dashes on the road's center line.
pub fn render_scene(spec: &SceneSpec, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index));
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f32, w as f32);
    let mut canvas = Canvas {
        h,
        w,
        classes: spec.classes,
        mask: vec![0; h * w],
        color: vec![jittered(Class::Background, &mut rng); h * w],
    };

    let horizon = hf * rng.random_range(0.38..0.50);
    let road_top = horizon + hf * rng.random_range(0.06..0.12);
    let road_bottom = (road_top + hf * rng.random_range(0.28..0.38)).min(hf);
    let road = jittered(Class::Road, &mut rng);
    canvas.paint(Class::Road, road, |y, _| y >= road_top && y < road_bottom);

    for _ in 0..count(spec.counts.buildings, &mut rng) {
        let bw = wf * rng.random_range(0.14..0.30);
        let bh = hf * rng.random_range(0.18..0.34);
        let x0 = rng.random_range(0.0..wf - bw);
        let tint = jittered(Class::Building, &mut rng);
        canvas.paint(Class::Building, tint, |y, x| x >= x0 && x < x0 + bw && y >= horizon - bh && y < horizon);
    }

    for _ in 0..count(spec.counts.trees, &mut rng) {
        let cx = rng.random_range(0.1..0.9) * wf;
        let cy = horizon + hf * rng.random_range(-0.12..0.02);
        let lobes: Vec<(f32, f32, f32)> = (0..rng.random_range(2..=3))
            .map(|_| {
                let r = hf * rng.random_range(0.07..0.12);
                (cy + rng.random_range(-0.5..0.5) * r, cx + rng.random_range(-0.8..0.8) * r, r)
            })
            .collect();
        let tint = jittered(Class::Tree, &mut rng);
        canvas.paint(Class::Tree, tint, |y, x| {
            lobes.iter().any(|&(ly, lx, r)| (y - ly).powi(2) + (x - lx).powi(2) < r * r)
        });
    }

    for _ in 0..count(spec.counts.signs, &mut rng) {
        let r = hf.min(wf) * rng.random_range(0.07..0.10);
        let cx = rng.random_range(r..wf - r);
        let cy = horizon - hf * rng.random_range(0.0..0.18);
        let tint = jittered(Class::Sign, &mut rng);
        canvas.paint(Class::Sign, tint, |y, x| (y - cy).powi(2) + (x - cx).powi(2) < r * r);
    }

    let thickness = (hf * 0.09).max(2.0);
    let center = 0.5 * (road_top + road_bottom);
    let dashes = count(spec.counts.lane_dashes, &mut rng);
    let slot = wf / dashes.max(1) as f32;
    for k in 0..dashes {
        let len = slot * rng.random_range(0.45..0.7);
        let x0 = k as f32 * slot + rng.random_range(0.0..slot - len);
        let tint = jittered(Class::Lane, &mut rng);
        canvas.paint(Class::Lane, tint, |y, x| {
            (y - center).abs() < thickness / 2.0 && x >= x0 && x < x0 + len && y < road_bottom
        });
    }

    let texture = Normal::new(0.0f32, 0.015).expect("valid sigma");
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, rgb) in canvas.color.iter().enumerate() {
        for (c, &v) in rgb.iter().enumerate() {
            data[c * h * w + i] = (v + texture.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Sample {
        image: Tensor::new(vec![3, h, w], data).expect("consistent by construction"),
        mask: canvas.mask,
        classes: spec.classes,
    }
}
