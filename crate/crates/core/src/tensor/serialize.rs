//! Binary parameter container.
//!
//! Layout (all integers little-endian `u32`, values little-endian `f64`):
//! `"MAST"`, version, count, then per tensor: name length, UTF-8 name,
//! rank, dims, values.

use std::io::{Read, Write};

use super::{ParamStore, Result, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"MAST";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| TensorError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_params(store: &ParamStore, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, FORMAT_VERSION as usize)?;
    put_u32(w, store.len())?;
    for (_, name, t) in store.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.dims() {
            put_u32(w, d)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = get_u32(r)? as u32;
    if version != FORMAT_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(format!("name is not UTF-8: {e}")))?;
        let rank = get_u32(r)?;
        let dims = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        store.add(name, Tensor::new(&dims, data)?)?;
    }
    Ok(store)
}
