//! Binary shard files.
//!
//! ```text
//! "RLSH" | u32 version | u32 N | section*
//! section := u8 name_len | name | u64 payload_len | payload
//! ```
//! All integers little-endian. Sections, in order: `meta` (u32 split code,
//! u64 seed), `images` (f32 × N·3·32·32), `labels`, `shape_ids`,
//! `texture_ids`, `fg_colors`, `bg_colors` (u32 × N each), `masks`
//! (N·32·32 bits, LSB-first within each byte).

use std::fs;
use std::path::Path;

use super::{DatasetShard, Split, IMAGE_LEN, PIXELS};
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"RLSH";
pub const SHARD_VERSION: u32 = 1;

const SECTIONS: [&str; 8] = [
    "meta",
    "images",
    "labels",
    "shape_ids",
    "texture_ids",
    "fg_colors",
    "bg_colors",
    "masks",
];

fn put_section(out: &mut Vec<u8>, name: &str, payload: &[u8]) {
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn u32s(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b & 1) << i)))
        .collect()
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1).collect()
}

/// Serializes a shard to bytes.
pub fn encode(shard: &DatasetShard) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + shard.images.len() * 4 + shard.masks.len() / 8 + shard.len() * 20);
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(shard.len() as u32).to_le_bytes());
    let mut meta = shard.split.code().to_le_bytes().to_vec();
    meta.extend_from_slice(&shard.seed.to_le_bytes());
    put_section(&mut out, "meta", &meta);
    let images: Vec<u8> = shard.images.iter().flat_map(|x| x.to_le_bytes()).collect();
    put_section(&mut out, "images", &images);
    put_section(&mut out, "labels", &u32s(&shard.labels));
    put_section(&mut out, "shape_ids", &u32s(&shard.shape_ids));
    put_section(&mut out, "texture_ids", &u32s(&shard.texture_ids));
    put_section(&mut out, "fg_colors", &u32s(&shard.fg_colors));
    put_section(&mut out, "bg_colors", &u32s(&shard.bg_colors));
    put_section(&mut out, "masks", &pack_bits(&shard.masks));
    out
}

pub fn write_shard(shard: &DatasetShard, path: &Path) -> Result<()> {
    fs::write(path, encode(shard))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if left < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                expected: n as u64,
                actual: left as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_u32s(bytes: &[u8]) -> Vec<u32> {
    bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}

/// Parses shard bytes.
pub fn decode(buf: &[u8]) -> Result<DatasetShard> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4)? != SHARD_MAGIC {
        return Err(Error::Format("missing RLSH magic".into()));
    }
    let version = cur.u32()?;
    if version != SHARD_VERSION {
        return Err(Error::Format(format!(
            "shard version {version} is not supported (expected {SHARD_VERSION})"
        )));
    }
    let n = cur.u32()? as usize;
    let mut payloads: Vec<&[u8]> = Vec::with_capacity(SECTIONS.len());
    for expected in SECTIONS {
        let len = cur.u8()? as usize;
        let name = cur.take(len)?;
        if name != expected.as_bytes() {
            return Err(Error::Format(format!(
                "expected section `{expected}`, found `{}`",
                String::from_utf8_lossy(name)
            )));
        }
        let size = cur.u64()? as usize;
        let want = match expected {
            "meta" => 12,
            "images" => n * IMAGE_LEN * 4,
            "masks" => (n * PIXELS).div_ceil(8),
            _ => n * 4,
        };
        if size != want {
            return Err(Error::Format(format!(
                "section `{expected}` declares {size} bytes, expected {want} for N={n}"
            )));
        }
        payloads.push(cur.take(size)?);
    }
    let split_code = u32::from_le_bytes(payloads[0][..4].try_into().expect("4 bytes"));
    let split = Split::from_code(split_code)
        .ok_or_else(|| Error::Format(format!("unknown split code {split_code}")))?;
    let seed = u64::from_le_bytes(payloads[0][4..12].try_into().expect("8 bytes"));
    let shard = DatasetShard {
        split,
        seed,
        images: payloads[1]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect(),
        labels: read_u32s(payloads[2]),
        shape_ids: read_u32s(payloads[3]),
        texture_ids: read_u32s(payloads[4]),
        fg_colors: read_u32s(payloads[5]),
        bg_colors: read_u32s(payloads[6]),
        masks: unpack_bits(payloads[7], n * PIXELS),
    };
    shard.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(shard)
}

pub fn read_shard(path: &Path) -> Result<DatasetShard> {
    decode(&fs::read(path)?)
}
