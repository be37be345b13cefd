//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "KFSCKPT\0"
//! version      u32       1
//! config_len   u64
//! config       JSON-encoded KfsConfig
//! n_params     u64
//! per parameter:
//!   name_len   u32
//!   name       UTF-8, e.g. "scale0.frek.unit1.numer"
//!   rank       u32
//!   dims       rank × u64
//!   values     numel × f64
//! digest       32 bytes  SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{KfsError, Result};
use crate::model::{KfsConfig, KfsModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"KFSCKPT\0";
pub const VERSION: u32 = 1;

pub fn encode(model: &KfsModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).map_err(|e| KfsError::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.store().len() as u64).to_le_bytes());
    for (_, name, value) in model.store().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KfsError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
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

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| KfsError::Checkpoint(format!("implausible length {v}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<KfsModel> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(KfsError::Checkpoint("not a checkpoint file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(KfsError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(KfsError::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.len()?;
    let cfg: KfsConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| KfsError::Checkpoint(format!("config: {e}")))?;
    let count = r.len()?;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| KfsError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= body.len())
            .ok_or_else(|| KfsError::Checkpoint(format!("parameter `{name}` is too large")))?;
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(KfsError::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    KfsModel::from_parts(cfg, &params)
}

pub fn save(model: &KfsModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<KfsModel> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| KfsError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
    decode(&bytes)
}
