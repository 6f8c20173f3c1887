//! Checkpoint files.
//!
//! ```text
//! "RLCK" | u32 version
//! u8 arch_len | arch | u32 regime | u64 seed | u32 epochs | u32 tensor_count
//! tensor := u16 name_len | name | u32 ndim | u32 dim × ndim | f32 × Πdims
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{arch_layers, param_shapes, Network, NetworkMeta, Regime};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + net.param_count() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(net.arch.len() as u8);
    out.extend_from_slice(net.arch.as_bytes());
    out.extend_from_slice(&net.meta.regime.code().to_le_bytes());
    out.extend_from_slice(&net.meta.seed.to_le_bytes());
    out.extend_from_slice(&net.meta.epochs.to_le_bytes());
    out.extend_from_slice(&(net.params.len() as u32).to_le_bytes());
    for (name, t) in &net.params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, encode(net))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
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
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a checkpoint. When `arch` is given the tensors are validated
/// against that architecture instead of the one recorded in the file.
pub fn decode(buf: &[u8], arch: Option<&str>) -> Result<Network> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing RLCK magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = r.take(1)?[0] as usize;
    let stored_arch = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Format("architecture name is not UTF-8".into()))?;
    let regime_code = r.u32()?;
    let regime =
        Regime::from_code(regime_code).ok_or_else(|| Error::Format(format!("unknown regime code {regime_code}")))?;
    let seed = r.u64()?;
    let epochs = r.u32()?;
    let count = r.u32()? as usize;

    let arch = arch.unwrap_or(&stored_arch).to_string();
    let layers = arch_layers(&arch)?;
    let expected = param_shapes(&layers);
    let mut params = IndexMap::new();
    for i in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let Some((_, want)) = expected.iter().find(|(n, _)| *n == name) else {
            return Err(Error::Integrity(format!("unknown tensor `{name}` for architecture {arch}")));
        };
        if *want != shape {
            return Err(Error::Integrity(format!(
                "tensor `{name}` has shape {shape:?}, architecture {arch} expects {want:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if let Some((missing, _)) = expected.iter().find(|(n, _)| !params.contains_key(n)) {
        return Err(Error::Integrity(format!("tensor `{missing}` missing for architecture {arch}")));
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", buf.len() - r.pos)));
    }
    // Keep declaration order regardless of file order.
    let params = expected
        .iter()
        .map(|(n, _)| (n.clone(), params.swap_remove(n).expect("checked above")))
        .collect();
    Ok(Network {
        arch,
        layers,
        params,
        meta: NetworkMeta { regime, seed, epochs },
    })
}

pub fn load(path: &Path) -> Result<Network> {
    decode(&fs::read(path)?, None)
}

/// Loads a checkpoint, validating it against `arch`.
pub fn load_as(path: &Path, arch: &str) -> Result<Network> {
    decode(&fs::read(path)?, Some(arch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build;

    #[test]
    fn round_trip_bit_identical() {
        let mut net = build("mini4", 9).unwrap();
        net.meta = NetworkMeta {
            regime: Regime::Adversarial,
            seed: 9,
            epochs: 12,
        };
        let bytes = encode(&net);
        let back = decode(&bytes, None).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncated_payload_reports_counts() {
        let bytes = encode(&build("mini3", 0).unwrap());
        match decode(&bytes[..bytes.len() - 3], None) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 32);
                assert_eq!(actual, 29);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_arch_names_first_mismatch() {
        let bytes = encode(&build("mini4", 0).unwrap());
        match decode(&bytes, Some("mini3")) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("conv4.weight"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let bytes = encode(&build("mini3", 0).unwrap());
        match decode(&bytes, Some("mini4")) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("conv4"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_header_is_format_error() {
        let mut bytes = encode(&build("mini3", 0).unwrap());
        bytes[4] = 7;
        assert!(matches!(decode(&bytes, None), Err(Error::Format(_))));
    }
}
