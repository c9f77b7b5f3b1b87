//! Little-endian binary checkpoints.
//!
//! Layout: magic `XNRF`, format version `u32`, then blocks until end of
//! file. Each block is `name_len u32, name bytes, rank u32, dims u32[rank],
//! payload`. Version 1 stores `f32` payloads; version 2 stores `f64` and is
//! written for double-precision stores. Adam moments are stored as blocks
//! named `__adam_m/<name>` and `__adam_v/<name>`, and the step counter as
//! `__step` holding four 16-bit limbs.

use std::fs;
use std::path::Path;

use super::params::{ParamStore, Precision};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XNRF";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;

const MOMENT_M: &str = "__adam_m/";
const MOMENT_V: &str = "__adam_v/";
const STEP: &str = "__step";

fn put_block(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64], wide: bool) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        if wide {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let wide = store.precision() == Precision::Double;
    let mut out = Vec::with_capacity(16 + store.num_values() * 12);
    out.extend_from_slice(MAGIC);
    let version = if wide { VERSION_F64 } else { VERSION_F32 };
    out.extend_from_slice(&version.to_le_bytes());
    for b in store.blocks() {
        put_block(&mut out, &b.name, &b.shape, &b.value, wide);
    }
    for b in store.blocks() {
        put_block(&mut out, &format!("{MOMENT_M}{}", b.name), &b.shape, &b.m, wide);
    }
    for b in store.blocks() {
        put_block(&mut out, &format!("{MOMENT_V}{}", b.name), &b.shape, &b.v, wide);
    }
    let s = store.step();
    let limbs: Vec<f64> = (0..4).map(|i| ((s >> (16 * i)) & 0xffff) as f64).collect();
    put_block(&mut out, STEP, &[4], &limbs, wide);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    let wide = match version {
        VERSION_F32 => false,
        VERSION_F64 => true,
        v => return Err(Error::Checkpoint(format!("unsupported version {v}"))),
    };
    let mut store = ParamStore::new(if wide {
        Precision::Double
    } else {
        Precision::Single
    });
    let mut step = None;
    let mut moments = Vec::new();
    while r.pos < buf.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let width = if wide { 8 } else { 4 };
        let bytes = r.take(n * width)?;
        let data: Vec<f64> = if wide {
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        } else {
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        if name == STEP {
            if n != 4 {
                return Err(Error::Checkpoint("malformed step block".into()));
            }
            step = Some(
                data.iter()
                    .enumerate()
                    .fold(0u64, |acc, (i, &l)| acc | ((l as u64) << (16 * i))),
            );
        } else if name.starts_with(MOMENT_M) || name.starts_with(MOMENT_V) {
            moments.push((name, data));
        } else {
            store.insert(&name, &shape, data)?;
        }
    }
    for (name, data) in moments {
        let (target, first) = match name.strip_prefix(MOMENT_M) {
            Some(t) => (t, true),
            None => (name.strip_prefix(MOMENT_V).unwrap(), false),
        };
        let block = store
            .block_mut(target)
            .ok_or_else(|| Error::Checkpoint(format!("moment for unknown block `{target}`")))?;
        if block.len() != data.len() {
            return Err(Error::Checkpoint(format!("moment size mismatch for `{target}`")));
        }
        if first {
            block.m = data;
        } else {
            block.v = data;
        }
    }
    store.set_step(step.ok_or_else(|| Error::Checkpoint("missing step counter".into()))?);
    Ok(store)
}

/// Writes through a temporary sibling and renames into place.
pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(store)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{adam_step, AdamConfig};
    use proptest::prelude::*;

    fn sample_store(precision: Precision, vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new(precision);
        s.insert("layer0/w", &[vals.len(), 1], vals.to_vec()).unwrap();
        s.insert("layer0/b", &[1], vec![0.5]).unwrap();
        for b in s.blocks_mut() {
            for (i, g) in b.grad.iter_mut().enumerate() {
                *g = (i as f64 + 1.0) * 0.1;
            }
        }
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let s = sample_store(Precision::Single, &[1.0]);
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"XNRF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let name_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(&bytes[12..12 + name_len], b"layer0/w");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"NOPE\x01\x00\x00\x00").is_err());
        let s = sample_store(Precision::Single, &[1.0, 2.0]);
        let bytes = encode(&s);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in prop::collection::vec(-100.0f64..100.0, 1..40),
                                   wide in any::<bool>()) {
            let precision = if wide { Precision::Double } else { Precision::Single };
            let s = sample_store(precision, &vals);
            let back = decode(&encode(&s)).unwrap();
            prop_assert_eq!(back.step(), s.step());
            for (a, b) in s.blocks().iter().zip(back.blocks()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(&a.shape, &b.shape);
                for (x, y) in a.value.iter().chain(&a.m).chain(&a.v)
                    .zip(b.value.iter().chain(&b.m).chain(&b.v)) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
