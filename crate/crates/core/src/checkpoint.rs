//! Tagged, checksummed tensor tables.
//!
//! Layout (little-endian): magic `SAGE`, version `u32`, 4-byte kind tag,
//! tensor count `u32`, then per tensor the name length `u32`, UTF-8 name
//! bytes and the tensor encoding; a CRC32 of all preceding bytes closes the
//! file.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::nn::TensorTable;
use crate::tensor::serialize::{read_tensor, read_u32, truncated, write_tensor};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAGE";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: usize = 1024;
const MAX_TENSORS: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Oracle,
    Generator,
    Heads,
    Encoder,
}

impl Kind {
    pub fn tag(self) -> [u8; 4] {
        *match self {
            Kind::Oracle => b"ORCL",
            Kind::Generator => b"SPGN",
            Kind::Heads => b"APFH",
            Kind::Encoder => b"ENCD",
        }
    }

    pub fn from_tag(tag: [u8; 4]) -> Result<Self> {
        match &tag {
            b"ORCL" => Ok(Kind::Oracle),
            b"SPGN" => Ok(Kind::Generator),
            b"APFH" => Ok(Kind::Heads),
            b"ENCD" => Ok(Kind::Encoder),
            _ => Err(Error::format(format!("unknown checkpoint kind {:?}", String::from_utf8_lossy(&tag)))),
        }
    }

    fn label(self) -> String {
        String::from_utf8_lossy(&self.tag()).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: Kind) -> Self {
        Checkpoint { kind, tensors: Vec::new() }
    }

    pub fn tensors(&self) -> &[(String, Tensor<f32>)] {
        &self.tensors
    }

    pub fn push<R: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<R>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > MAX_NAME {
            return Err(Error::format(format!("tensor name of length {}", name.len())));
        }
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::format(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.push((name, tensor.cast()));
        Ok(())
    }

    pub fn extend<R: Real>(&mut self, items: impl IntoIterator<Item = (String, Tensor<R>)>) -> Result<()> {
        for (name, t) in items {
            self.push(name, &t)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(format!("checkpoint has no tensor `{name}`")))
    }

    /// Stores an integer exactly representable in `f32`.
    pub fn put_scalar(&mut self, name: &str, value: u32) -> Result<()> {
        if value >= 1 << 24 {
            return Err(Error::format(format!("scalar `{name}`={value} is not exact in f32")));
        }
        self.push(name, &Tensor::<f32>::scalar(value as f32))
    }

    pub fn scalar(&self, name: &str) -> Result<u32> {
        let t = self.get(name)?;
        match t.data() {
            [v] if v.fract() == 0.0 && *v >= 0.0 && *v < (1 << 24) as f32 => Ok(*v as u32),
            _ => Err(Error::format(format!("tensor `{name}` is not an integer scalar"))),
        }
    }

    /// Stores a 64-bit value as four exact 16-bit limbs.
    pub fn put_u64(&mut self, name: &str, value: u64) -> Result<()> {
        let limbs = (0..4).map(|i| ((value >> (16 * i)) & 0xFFFF) as f32).collect();
        self.push(name, &Tensor::<f32>::new(vec![4], limbs)?)
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        let t = self.get(name)?;
        if t.shape() != [4] || t.data().iter().any(|v| v.fract() != 0.0 || !(0.0..65536.0).contains(v)) {
            return Err(Error::format(format!("tensor `{name}` is not a 64-bit value")));
        }
        Ok(t.data().iter().enumerate().map(|(i, &v)| (v as u64) << (16 * i)).sum())
    }

    /// Tensors under `prefix.` with the prefix stripped, converted to `R`.
    pub fn table<R: Real>(&self, prefix: &str) -> TensorTable<R> {
        let lead = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| {
                let key = if prefix.is_empty() { Some(n.as_str()) } else { n.strip_prefix(&lead) };
                key.map(|k| (k.to_string(), t.cast()))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.kind.tag());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            write_tensor(&mut buf, t)?;
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::format("checkpoint shorter than its fixed header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(format!("bad checkpoint magic {:?}", &bytes[..4])));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = &body[4..];
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag).map_err(truncated)?;
        let kind = Kind::from_tag(tag)?;
        let count = read_u32(&mut r)? as usize;
        if count > MAX_TENSORS {
            return Err(Error::format(format!("implausible tensor count {count}")));
        }
        let mut ckpt = Checkpoint::new(kind);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > MAX_NAME || len > r.len() {
                return Err(Error::format(format!("implausible name length {len}")));
            }
            let (name, rest) = r.split_at(len);
            r = rest;
            let name = std::str::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let t: Tensor<f32> = read_tensor(&mut r)?;
            ckpt.push(name, &t)?;
        }
        if !r.is_empty() {
            return Err(Error::format(format!("{} trailing bytes after the tensor table", r.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    /// Reads a checkpoint and checks its kind.
    pub fn load(path: &Path, expected: Kind) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let ckpt = Self::from_bytes(&bytes)?;
        if ckpt.kind != expected {
            return Err(Error::KindMismatch { expected: expected.label(), found: ckpt.kind.label() });
        }
        Ok(ckpt)
    }

    /// SHA-256 of the serialized form.
    pub fn digest(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_bytes()?).into())
    }
}

/// SHA-256 over a named tensor list in its checkpoint table encoding.
pub fn state_digest<R: Real>(state: &[(String, Tensor<R>)]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for (name, t) in state {
        hasher.update((name.len() as u32).to_le_bytes());
        hasher.update(name.as_bytes());
        let mut buf = Vec::new();
        write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
        hasher.update(&buf);
    }
    hasher.finalize().into()
}

/// First eight digest bytes as a little-endian integer.
pub fn fingerprint_of(digest: &[u8; 32]) -> u64 {
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
