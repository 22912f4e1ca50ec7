//! Binary record files shared by checkpoints and feature caches.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STARNET1" | version u32 | config hash [u8; 32] | record count u32
//! per record: name len u32 | name | rank u32 | extents u64 * rank
//!             | payload f64 * numel | crc32 u32 of the record bytes before it
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamMeta, Stage};
use crate::Tensor;

pub const MAGIC: &[u8; 8] = b"STARNET1";
pub const VERSION: u32 = 1;

const META_STAGE: &str = "meta/stage";
const META_SEED: &str = "meta/seed";

/// Serializes named tensors in the given order.
pub fn encode_records<'a>(hash: &[u8; 32], records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let records: Vec<_> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(hash);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in records {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a record file: `(config hash, records in file order)`.
pub fn decode_records(bytes: &[u8], path: &Path) -> Result<([u8; 32], Vec<(String, Tensor)>)> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic, not a STARNET1 file"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}, expected {VERSION}")));
    }
    let hash: [u8; 32] = c.take(32, "config hash")?.try_into().unwrap();
    let count = c.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = c.pos;
        let len = c.u32("name length")? as usize;
        let name = String::from_utf8(c.take(len, "name")?.to_vec())
            .map_err(|_| Error::format(path, format!("record {i} name is not UTF-8")))?;
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(path, format!("record `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("extent")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n > 0 && n <= (bytes.len() - c.pos) / 8)
            .ok_or_else(|| Error::format(path, format!("record `{name}` extents {shape:?} exceed the file")))?;
        let payload = c.take(8 * numel, "payload")?;
        let body_end = c.pos;
        let crc = c.u32("checksum")?;
        if crc32fast::hash(&bytes[start..body_end]) != crc {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                record: name,
            });
        }
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, format!("record `{name}`: {e}")))?;
        records.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last record"));
    }
    Ok((hash, records))
}

pub fn hex(hash: &[u8; 32]) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter records followed by the metadata records.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let stage = Tensor::scalar(match params.meta.stage {
        Stage::Backbone => 0.0,
        Stage::Transformer => 1.0,
    });
    let s = params.meta.seed;
    let seed = Tensor::new(vec![2], vec![(s & 0xffff_ffff) as f64, (s >> 32) as f64]).expect("two entries");
    let records = params
        .iter()
        .map(|(n, p)| (n, &p.value))
        .chain([(META_STAGE, &stage), (META_SEED, &seed)]);
    encode_records(&params.meta.config_hash, records)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. With `expected` set, a file written under a different
/// config hash is rejected.
pub fn load_checkpoint(path: &Path, expected: Option<&[u8; 32]>) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, expected)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path, expected: Option<&[u8; 32]>) -> Result<ModelParams> {
    let (hash, records) = decode_records(bytes, path)?;
    if let Some(want) = expected {
        if *want != hash {
            return Err(Error::ConfigMismatch {
                expected: hex(want),
                found: hex(&hash),
            });
        }
    }
    let mut meta = ParamMeta {
        config_hash: hash,
        ..ParamMeta::default()
    };
    let mut params = ModelParams::new(meta.clone());
    for (name, t) in records {
        match name.as_str() {
            META_STAGE => {
                meta.stage = if t.item() == 0.0 { Stage::Backbone } else { Stage::Transformer };
            }
            META_SEED => {
                let d = t.data();
                meta.seed = (d[0] as u64) | ((d[1] as u64) << 32);
            }
            _ => params.insert(name, t).map_err(|e| Error::format(path, e.to_string()))?,
        }
    }
    params.meta = meta;
    Ok(params)
}
