//! Binary checkpoint format.
//!
//! ```text
//! magic   "XFRCKPT1"                     8 bytes
//! version u32 LE
//! fingerprint   u32 LE length + UTF-8
//! provenance    u32 LE length + UTF-8 JSON
//! tensor count  u32 LE
//! per tensor:   u32 name length + UTF-8 name, u32 rank,
//!               rank × u32 dims, prod(dims) × f32 LE
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ParameterVector, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"XFRCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub init_mode: String,
    pub source_task: Option<String>,
    pub seed: u64,
    pub epochs: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub params: ParameterVector<f32>,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(arch: &Architecture, params: ParameterVector<f32>, provenance: Provenance) -> Self {
        Self {
            version: FORMAT_VERSION,
            fingerprint: arch.fingerprint(),
            params,
            provenance,
        }
    }

    pub fn body_fingerprint(&self) -> &str {
        self.fingerprint.split('-').next().unwrap_or("")
    }

    /// Errors unless the checkpoint was produced by exactly `arch`.
    pub fn check_compatible(&self, arch: &Architecture) -> Result<()> {
        if self.fingerprint != arch.fingerprint() {
            return Err(Error::IncompatibleArchitecture(format!(
                "checkpoint fingerprint {} does not match {}",
                self.fingerprint,
                arch.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.params.num_scalars() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut out, &self.fingerprint)?;
        put_str(&mut out, &serde_json::to_string(&self.provenance)?)?;
        put_u32(&mut out, self.params.len())?;
        for entry in self.params.iter() {
            put_str(&mut out, &entry.name)?;
            let shape = entry.tensor.shape();
            put_u32(&mut out, shape.len())?;
            for &d in shape {
                put_u32(&mut out, d)?;
            }
            for v in entry.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let fingerprint = r.string()?;
        let provenance: Provenance = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::CorruptCheckpoint(format!("provenance: {e}")))?;
        let count = r.u32()?;
        let mut params = ParameterVector::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::CorruptCheckpoint("dimension overflow".into()))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(dims, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
            params
                .push(name, tensor)
                .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            version,
            fingerprint,
            params,
            provenance,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Target parameters warm-started from `source`.
///
/// Every non-head tensor is copied exactly. The head is copied too when the
/// architectures are identical, otherwise it is freshly initialized under
/// `seed`. Returns the parameters and whether the head was replaced.
pub fn transfer_params(
    source: &Checkpoint,
    target: &Architecture,
    seed: u64,
) -> Result<(ParameterVector<f32>, bool)> {
    let target_fp = target.fingerprint();
    let target_body = target_fp.split('-').next().unwrap_or("");
    if source.body_fingerprint() != target_body {
        return Err(Error::IncompatibleArchitecture(format!(
            "source body {} does not match target body {}",
            source.body_fingerprint(),
            target_body
        )));
    }
    if source.fingerprint == target_fp {
        return Ok((source.params.clone(), false));
    }
    let mut params = target.init_params::<f32>(seed)?;
    let heads = target.head_param_names()?;
    for entry in params.iter_mut().filter(|e| !heads.contains(&e.name)) {
        let src = source.params.get(&entry.name).ok_or_else(|| {
            Error::IncompatibleArchitecture(format!("source lacks {}", entry.name))
        })?;
        if src.shape() != entry.tensor.shape() {
            return Err(Error::IncompatibleArchitecture(format!(
                "{}: {:?} vs {:?}",
                entry.name,
                src.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = src.clone();
    }
    Ok((params, true))
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("invalid UTF-8".into()))
    }
}
