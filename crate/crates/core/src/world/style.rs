use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Analytic photometric style. Identity is `StyleParams::default()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Rotation of the chroma plane, in degrees.
    pub hue_shift: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub gamma: f32,
    pub noise_sigma: f32,
    /// Mix weight toward mid gray.
    pub haze: f32,
}

impl Default for StyleParams {
    fn default() -> Self {
        StyleParams { hue_shift: 0.0, brightness: 0.0, contrast: 1.0, gamma: 1.0, noise_sigma: 0.0, haze: 0.0 }
    }
}

impl StyleParams {
    /// All-zero spread, used as "no jitter".
    pub fn zero_spread() -> Self {
        StyleParams { hue_shift: 0.0, brightness: 0.0, contrast: 0.0, gamma: 0.0, noise_sigma: 0.0, haze: 0.0 }
    }

    /// Parameter vector with hue scaled to half-turns, for distances.
    pub fn to_vector(&self) -> [f32; 6] {
        [self.hue_shift / 180.0, self.brightness, self.contrast, self.gamma, self.noise_sigma, self.haze]
    }

    pub fn distance(&self, other: &StyleParams) -> f32 {
        let (a, b) = (self.to_vector(), other.to_vector());
        a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
    }

    /// Range check; applies to means and to jittered draws alike.
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("brightness", self.brightness, -0.3, 0.3),
            ("contrast", self.contrast, 0.5, 1.5),
            ("gamma", self.gamma, 0.5, 2.0),
            ("noise_sigma", self.noise_sigma, 0.0, 0.1),
            ("haze", self.haze, 0.0, 1.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Config(format!("style {name}={v} outside [{lo}, {hi}]")));
            }
        }
        if !self.hue_shift.is_finite() {
            return Err(Error::Config("style hue_shift must be finite".into()));
        }
        Ok(())
    }

    /// Uniform draw of each field within `±spread` of `self`, clamped to the
    /// valid ranges.
    pub fn jittered(&self, spread: &StyleParams, rng: &mut impl Rng) -> StyleParams {
        let mut draw = |mean: f32, s: f32, lo: f32, hi: f32| {
            if s > 0.0 { (mean + rng.random_range(-s..s)).clamp(lo, hi) } else { mean }
        };
        StyleParams {
            hue_shift: draw(self.hue_shift, spread.hue_shift, f32::MIN, f32::MAX),
            brightness: draw(self.brightness, spread.brightness, -0.3, 0.3),
            contrast: draw(self.contrast, spread.contrast, 0.5, 1.5),
            gamma: draw(self.gamma, spread.gamma, 0.5, 2.0),
            noise_sigma: draw(self.noise_sigma, spread.noise_sigma, 0.0, 0.1),
            haze: draw(self.haze, spread.haze, 0.0, 0.6),
        }
    }
}

const RGB_TO_YIQ: [[f32; 3]; 3] = [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]];

fn invert3(m: &[[f32; 3]; 3]) -> [[f32; 3]; 3] {
    let m = m.map(|r| r.map(f64::from));
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0f32; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = ((m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det) as f32;
        }
    }
    inv
}

/// RGB matrix rotating hue by `degrees` around the luma axis.
fn hue_matrix(degrees: f32) -> [[f32; 3]; 3] {
    let (s, c) = degrees.to_radians().sin_cos();
    let rot = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    let back = invert3(&RGB_TO_YIQ);
    let mul = |a: &[[f32; 3]; 3], b: &[[f32; 3]; 3]| {
        let mut o = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    };
    mul(&back, &mul(&rot, &RGB_TO_YIQ))
}

/// Applies hue, contrast, brightness, gamma, haze and noise in that order,
/// then clamps to [0, 1]. Steps at their identity value are skipped so the
/// identity style is exact.
pub fn apply_style(image: &Tensor<f32>, params: &StyleParams, seed: u64) -> Result<Tensor<f32>> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("apply_style expects a 3×H×W image, got {shape:?}")));
    }
    let plane = shape[1] * shape[2];
    let mut out = image.data().to_vec();
    if params.hue_shift != 0.0 {
        let m = hue_matrix(params.hue_shift);
        for i in 0..plane {
            let rgb = [out[i], out[plane + i], out[2 * plane + i]];
            for (c, row) in m.iter().enumerate() {
                out[c * plane + i] = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            }
        }
    }
    let noise = Normal::new(0.0f32, params.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut out {
        let mut x = *v * params.contrast + params.brightness;
        if params.gamma != 1.0 {
            x = x.max(0.0).powf(params.gamma);
        }
        if params.haze != 0.0 {
            x = (1.0 - params.haze) * x + params.haze * 0.5;
        }
        if params.noise_sigma > 0.0 {
            x += noise.sample(&mut rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    Tensor::new(shape.to_vec(), out)
}

/// The four training styles: lakeside (cool, dim), pier (high contrast),
/// valley (green, bright) and volcano (warm, hazy).
pub fn style_presets() -> Vec<(&'static str, StyleParams)> {
    vec![
        (
            "lakeside",
            StyleParams { hue_shift: -25.0, brightness: -0.12, contrast: 0.85, gamma: 1.35, noise_sigma: 0.03, haze: 0.05 },
        ),
        (
            "pier",
            StyleParams { hue_shift: 0.0, brightness: -0.20, contrast: 1.45, gamma: 0.95, noise_sigma: 0.02, haze: 0.0 },
        ),
        (
            "valley",
            StyleParams { hue_shift: 30.0, brightness: 0.14, contrast: 1.05, gamma: 0.75, noise_sigma: 0.02, haze: 0.05 },
        ),
        (
            "volcano",
            StyleParams { hue_shift: -55.0, brightness: 0.04, contrast: 0.80, gamma: 1.10, noise_sigma: 0.02, haze: 0.45 },
        ),
    ]
}

/// Held-out target styles, distinct from every preset.
pub fn target_styles() -> Vec<(&'static str, StyleParams)> {
    vec![
        (
            "dusk",
            StyleParams { hue_shift: -40.0, brightness: -0.18, contrast: 0.80, gamma: 1.50, noise_sigma: 0.04, haze: 0.15 },
        ),
        (
            "snow-glare",
            StyleParams { hue_shift: 15.0, brightness: 0.24, contrast: 0.90, gamma: 0.70, noise_sigma: 0.03, haze: 0.30 },
        ),
    ]
}
