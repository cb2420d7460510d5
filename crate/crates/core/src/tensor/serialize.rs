//! Binary tensor encoding: rank and dims as little-endian `u32`, then the
//! row-major payload as little-endian `f32`.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Refuses absurd headers from corrupted input before allocating.
const MAX_RANK: usize = 8;
const MAX_ELEMENTS: usize = 1 << 28;

pub fn write_tensor<R: Real>(w: &mut impl Write, t: &Tensor<R>) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("unexpected end of data")
    } else {
        Error::Io(e)
    }
}

pub fn read_tensor<R: Real>(r: &mut impl Read) -> Result<Tensor<R>> {
    let rank = read_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(Error::format(format!("tensor rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).unwrap_or(usize::MAX);
    if n > MAX_ELEMENTS {
        return Err(Error::format(format!("tensor of shape {shape:?} is implausibly large")));
    }
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| R::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}
