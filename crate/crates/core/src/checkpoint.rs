//! Binary parameter checkpoints with an FNV-1a integrity digest.
//!
//! ```text
//! magic     8 bytes "MASMCKP1"
//! count     u32
//! records   count x { name_len u32, name utf-8, rank u32, extents rank x u32, values f32 }
//! digest    u64 FNV-1a of every preceding byte
//! ```
//!
//! Integers and floats are little-endian.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MASMCKP1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = fnv1a(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses checkpoint bytes into ordered `(name, tensor)` records.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 12 {
        return Err(Error::format(path, "file too short"));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Digest { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
        path,
    };
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "parameter name is not utf-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::format(path, format!("{name}: extents overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::format(path, "payload overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("{name}: {e}")))?;
        records.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes after records"));
    }
    Ok(records)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Copies records into `params`, requiring the exact same name set and shapes.
///
/// Shape conflicts on shared names are reported before unknown or missing
/// names. On error `params` is left untouched.
pub fn apply_checkpoint(params: &mut ParamStore, records: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in &records {
        if let Some(id) = params.lookup(name) {
            let expected = params.get(id).shape();
            if expected != t.shape() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
    }
    if let Some((name, _)) = records.iter().find(|(n, _)| params.lookup(n).is_none()) {
        return Err(Error::UnknownParameter(name.clone()));
    }
    let seen: HashSet<&str> = records.iter().map(|(n, _)| n.as_str()).collect();
    if let Some((_, name, _)) = params.iter().find(|(_, n, _)| !seen.contains(*n)) {
        return Err(Error::MissingParameter(name.to_string()));
    }
    for (name, t) in records {
        params.set(&name, t)?;
    }
    Ok(())
}

/// Loads a checkpoint file into `params`.
pub fn load_into(path: impl AsRef<Path>, params: &mut ParamStore) -> Result<()> {
    apply_checkpoint(params, load_checkpoint(path)?)
}
