//! Little-endian binary framing shared by bundle, ground-truth and
//! reconstruction files.
//!
//! ```text
//! magic        4 bytes
//! version      u32
//! spec         u32 byte length, UTF-8 model spec text (may be empty)
//! batch size   u32
//! flags        u32
//! name table   u32 count, then per name: u32 byte length, UTF-8 bytes
//! tensors      per name, in table order: u32 rank, rank × u32 dims,
//!              f64 payload
//! crc          u32 CRC-32 (IEEE) of every preceding byte
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub magic: [u8; 4],
    pub spec: String,
    pub batch_size: u32,
    pub flags: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.spec.len() as u32);
        out.extend_from_slice(self.spec.as_bytes());
        put_u32(&mut out, self.batch_size);
        put_u32(&mut out, self.flags);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, _) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
        }
        for (_, t) in &self.tensors {
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Checks the magic, then the trailing checksum, then the version, and
    /// only then parses the body.
    pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self> {
        let found = bytes.get(..4).unwrap_or(bytes);
        if found != magic {
            return Err(Error::BadMagic {
                offset: 0,
                expected: magic.to_vec(),
                found: found.to_vec(),
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Checksum {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let spec_len = r.u32()? as usize;
        let spec = String::from_utf8(r.take(spec_len)?.to_vec())
            .map_err(|_| Error::Format("model spec is not UTF-8".into()))?;
        let batch_size = r.u32()?;
        let flags = r.u32()?;
        let count = r.u32()? as usize;
        let mut names = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            names.push(name);
        }
        let mut tensors = Vec::with_capacity(names.len());
        for name in names {
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Archive {
            magic,
            spec,
            batch_size,
            flags,
            tensors,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
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
            .ok_or_else(|| Error::Format(format!("unexpected end of data at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
