//! `HLT1` parameter files.
//!
//! Layout (little-endian): magic `HLT1`, `u32` version, `u32` parameter count,
//! then per parameter a `u16`-prefixed UTF-8 name, `u8` rank, `u32` per
//! dimension and the `f64` values in row-major order.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::binio::{put_string, ByteReader};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"HLT1";
pub const PARAMS_VERSION: u32 = 1;

pub fn write_params<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let mut out = Vec::with_capacity(16 + store.numel() * 8);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    let count = u32::try_from(store.len()).map_err(|_| Error::Contract("too many parameters".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        put_string(&mut out, name)?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Contract("rank too large".into()))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract("dimension too large".into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = ByteReader::new(&bytes);
    rd.magic(PARAMS_MAGIC)?;
    let version = rd.u32("version")?;
    if version != PARAMS_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = rd.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = rd.offset();
        let name = rd.string("parameter name")?;
        let rank = rd.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(rd.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = rd.take(n * 8, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
        store.insert(name, t).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
    }
    if !rd.is_at_end() {
        return Err(rd.error("trailing bytes after last parameter"));
    }
    Ok(store)
}
