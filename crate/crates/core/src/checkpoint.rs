//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"SSTMCKPT" | u32 version
//! u32 config_len | config_len bytes of UTF-8 key=value lines
//! per tensor: u32 name_len | name | u32 rank | rank × u64 dims | f32 data
//! u64 record_count | u32 crc32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::config::{parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSTMCKPT";
pub const VERSION: u32 = 1;

pub fn encode(weights: &ParamStore, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + weights.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for (name, t) in weights.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Parses checkpoint bytes. Structural errors (magic, version,
/// truncation, duplicate names) are reported before the checksum.
pub fn decode(bytes: &[u8]) -> Result<(ParamStore, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let clen = r.u32("config length")? as usize;
    let text = r.utf8(clen, "config")?;
    let mut config = ModelConfig::sstm();
    for (k, v) in parse_kv(text)? {
        config.set(&k, &v)?;
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("checkpoint footer missing".into()));
    }
    let body_end = bytes.len() - 12;
    let mut weights = ParamStore::new();
    while r.pos < body_end {
        let nlen = r.u32("tensor name length")? as usize;
        let name = r.utf8(nlen, "tensor name")?.to_string();
        let rank = r.u32("tensor rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n > 0 && n <= body_end).ok_or_else(|| {
            Error::Format(format!("{name}: implausible shape {shape:?}"))
        })?;
        let raw = r.take(n * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if weights.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        weights.insert(name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != body_end {
        return Err(Error::Truncated("last tensor record overlaps the footer".into()));
    }
    let count = r.u64("record count")?;
    if count != weights.len() as u64 {
        return Err(Error::Truncated(format!(
            "footer lists {count} tensors, found {}",
            weights.len()
        )));
    }
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[..body_end + 8]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok((weights, config))
}

pub fn save(path: impl AsRef<Path>, weights: &ParamStore, config: &ModelConfig) -> Result<()> {
    fs::write(path, encode(weights, config))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParamStore, ModelConfig)> {
    decode(&fs::read(path)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let (w, c) = load(path)?;
    Model::from_parts(c, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore, ModelConfig) {
        let mut w = ParamStore::new();
        w.insert("a.weight", Tensor::from_fn(&[2, 3, 1], |i| i as f32 - 2.5)).unwrap();
        w.insert("b", Tensor::scalar(-0.0)).unwrap();
        let mut c = ModelConfig::sstm().toy();
        c.seed = 42;
        (w, c)
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let (w, c) = sample();
        let bytes = encode(&w, &c);
        let (w2, c2) = decode(&bytes).unwrap();
        assert_eq!(c2, c);
        assert_eq!(encode(&w2, &c2), bytes);
        assert_eq!(w2.get("b").unwrap().data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn every_truncation_is_an_error() {
        let (w, c) = sample();
        let bytes = encode(&w, &c);
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "prefix {n} accepted");
        }
    }

    #[test]
    fn bit_flip_detected() {
        let (w, c) = sample();
        let bytes = encode(&w, &c);
        // a payload bit only the checksum can catch
        let mut bad = bytes.clone();
        bad[bytes.len() - 13] ^= 0x10;
        assert!(matches!(decode(&bad), Err(Error::Checksum { .. })));
        for i in 0..bytes.len() {
            for b in 0..8 {
                let mut bad = bytes.clone();
                bad[i] ^= 1 << b;
                assert!(decode(&bad).is_err(), "flip of byte {i} bit {b} accepted");
            }
        }
    }

    #[test]
    fn header_errors() {
        let (w, c) = sample();
        let mut bytes = encode(&w, &c);
        bytes[8] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }
}
