//! Binary checkpoints: run configuration, parameters, and optimizer state.
//!
//! Layout (little-endian): magic `LFRC`, u32 version, u64 epoch, 32-byte
//! SHA-256 of the config JSON, u32 length + config JSON, u32 parameter
//! count, then per parameter u32 name length, name, u8 group tag, u32 rank,
//! u64 extents, f64 values. The optimizer follows as u64 step count and per
//! parameter its first and second moment buffers (f64, parameter extent).

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;
use crate::params::{ParamGroup, ParamStore};
use crate::train::{AdamState, RunConfig};

pub const CKPT_MAGIC: [u8; 4] = *b"LFRC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u64,
    pub params: ParamStore,
    pub optim: AdamState,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.config)?.as_bytes()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_string(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(json.as_bytes()));
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.params() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.tag());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for d in p.value.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if self.optim.m.len() != self.params.len() || self.optim.v.len() != self.params.len() {
            return Err(Error::dim("checkpoint", &[self.params.len()], &[self.optim.m.len(), self.optim.v.len()]));
        }
        out.extend_from_slice(&self.optim.step.to_le_bytes());
        for (p, (m, v)) in self.params.params().iter().zip(self.optim.m.iter().zip(&self.optim.v)) {
            if m.len() != p.value.numel() || v.len() != p.value.numel() {
                return Err(Error::dim("checkpoint", p.value.shape(), &[m.len(), v.len()]));
            }
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CKPT_MAGIC {
            return Err(FormatError::BadMagic {
                expected: CKPT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(FormatError::VersionMismatch {
                expected: CKPT_VERSION,
                found: version,
            }
            .into());
        }
        let epoch = r.u64()?;
        let hash = r.take(32)?.to_vec();
        let len = r.u32()? as usize;
        let json = r.take(len)?;
        if Sha256::digest(json).as_slice() != hash.as_slice() {
            return Err(FormatError::Malformed("config hash does not match config".into()).into());
        }
        let json = std::str::from_utf8(json).map_err(|e| FormatError::Malformed(format!("config: {e}")))?;
        let config: RunConfig = serde_json::from_str(json)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| FormatError::Malformed(format!("parameter name: {e}")))?
                .to_string();
            let tag = r.take(1)?[0];
            let group = ParamGroup::from_tag(tag)
                .ok_or_else(|| FormatError::Malformed(format!("unknown parameter group {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r.f64s(numel)?;
            params.add(name, group, Tensor::new(shape, data)?);
        }
        let step = r.u64()?;
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for p in params.params() {
            m.push(r.f64s(p.value.numel())?);
            v.push(r.f64s(p.value.numel())?);
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)).into());
        }
        Ok(Self {
            config,
            epoch,
            params,
            optim: AdamState { step, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or(
            FormatError::TruncatedPayload {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FormatError::Malformed("extent overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}
