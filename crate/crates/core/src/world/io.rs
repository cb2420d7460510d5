use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::scene::Sample;
use crate::error::{Error, Result};
use crate::tensor::serialize::{read_u32, truncated};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"SGWD";
pub const DATASET_VERSION: u32 = 1;

/// Largest canvas side accepted when reading.
const MAX_SIDE: usize = 4096;

pub fn write_dataset(w: &mut impl Write, samples: &[Sample]) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        for v in [s.height(), s.width(), s.classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(s.image.numel() * 4 + s.mask.len());
        for v in s.image.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.mask);
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(format!("bad dataset magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let (h, w, k) = (read_u32(r)? as usize, read_u32(r)? as usize, read_u32(r)? as usize);
        if h == 0 || w == 0 || h > MAX_SIDE || w > MAX_SIDE || !(1..=256).contains(&k) {
            return Err(Error::format(format!("sample {i}: implausible header {h}x{w}, K={k}")));
        }
        let mut bytes = vec![0u8; 3 * h * w * 4];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let mut mask = vec![0u8; h * w];
        r.read_exact(&mut mask).map_err(truncated)?;
        if let Some(&bad) = mask.iter().find(|&&c| c as usize >= k) {
            return Err(Error::format(format!("sample {i}: mask value {bad} outside K={k}")));
        }
        samples.push(Sample { image: Tensor::new(vec![3, h, w], data)?, mask, classes: k });
    }
    Ok(samples)
}

impl super::Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_dataset(&mut w, &self.samples)?;
        w.flush()?;
        Ok(())
    }

    /// Loads a dataset file; the name is taken from the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let samples = read_dataset(&mut BufReader::new(File::open(path)?))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(super::Dataset { name, samples })
    }
}

/// Binary PPM of masks in the base palette, stacked top to bottom.
pub fn masks_to_ppm(masks: &[&[u8]], height: usize, width: usize) -> Result<Vec<u8>> {
    if masks.iter().any(|m| m.len() != height * width) {
        return Err(Error::shape(format!("every mask must hold {height}x{width} pixels")));
    }
    let mut out = format!("P6\n{width} {}\n255\n", height * masks.len()).into_bytes();
    for &c in masks.iter().flat_map(|m| m.iter()) {
        let rgb = super::scene::BASE_PALETTE.get(c as usize).copied().unwrap_or([1.0, 0.0, 1.0]);
        out.extend(rgb.map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{render_scene, SceneSpec};

    #[test]
    fn round_trip_and_truncation() {
        let spec = SceneSpec { height: 16, width: 24, ..SceneSpec::default() };
        let samples: Vec<Sample> = (0..3).map(|i| render_scene(&spec, i)).collect();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &samples).unwrap();
        assert_eq!(read_dataset(&mut bytes.as_slice()).unwrap(), samples);
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(read_dataset(&mut &bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let ppm = masks_to_ppm(&[&samples[0].mask], 16, 24).unwrap();
        assert_eq!(ppm.len(), b"P6\n24 16\n255\n".len() + 16 * 24 * 3);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}
