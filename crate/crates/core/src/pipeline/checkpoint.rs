//! Binary checkpoint: magic `WOCK`, little-endian throughout.
//!
//! Layout: magic, version u16, image channels u32, config echo (u32 length +
//! UTF-8), param count u32, then per param: name (u16 length + UTF-8),
//! trainable u8, rank u8, dims u32 each, f64 payload. A trailing u64 holds
//! FNV-1a over every payload byte in order.

use std::path::Path;

use super::{Model, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WOCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_update(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a digest of all parameter payloads in store order.
pub fn payload_digest(model: &Model) -> u64 {
    model.store.iter().fold(FNV_OFFSET, |h, (_, p)| {
        fnv1a_update(h, &p.value.to_le_bytes())
    })
}

pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.image_channels as u32).to_le_bytes());
    let echo = model.config.echo();
    out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    out.extend_from_slice(echo.as_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&p.value.to_le_bytes());
    }
    out.extend_from_slice(&payload_digest(model).to_le_bytes());
    out
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn str(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Rebuild a model from checkpoint bytes, checking the digest and every shape.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let c_img = r.u32("image channels")? as usize;
    let n = r.u32("config length")? as usize;
    let echo = r.str(n, "config")?;
    let mut cfg = TrainConfig::default();
    cfg.apply_text(echo)?;
    // Frozen values come from the payload below.
    let build = TrainConfig {
        embeddings: None,
        ..cfg.clone()
    };
    let mut model = Model::new(&build, c_img)?;
    model.config = cfg;

    let count = r.u32("param count")? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} params, model has {}",
            model.store.len()
        )));
    }
    let mut digest = FNV_OFFSET;
    for _ in 0..count {
        let len = r.u16("param name length")? as usize;
        let name = r.str(len, "param name")?.to_string();
        let trainable = r.u8("trainable flag")? != 0;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown param `{name}`")))?;
        let p = model.store.get(id);
        if p.value.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "param `{name}` has shape {shape:?} in the checkpoint but {:?} in the model",
                p.value.shape()
            )));
        }
        if p.trainable != trainable {
            return Err(Error::Checkpoint(format!(
                "param `{name}` disagrees on the trainable flag"
            )));
        }
        let payload = r.take(8 * p.value.len(), "payload")?;
        digest = fnv1a_update(digest, payload);
        let data = model.store.get_mut(id).value.data_mut();
        for (d, c) in data.iter_mut().zip(payload.chunks_exact(8)) {
            *d = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    let stored = u64::from_le_bytes(r.take(8, "digest")?.try_into().expect("8 bytes"));
    if stored != digest {
        return Err(Error::Checkpoint(format!(
            "digest mismatch: stored {stored:016x}, computed {digest:016x}"
        )));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after digest".into()));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
