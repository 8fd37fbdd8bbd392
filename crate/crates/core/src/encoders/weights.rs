//! Binary parameter files.
//!
//! Layout (little-endian): the 8-byte magic `STANW01\0`, then for each
//! parameter in name order: name length (`u32`), UTF-8 name bytes, rank
//! (`u32`), each dim (`u64`), and the values as `f64`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 8] = b"STANW01\0";

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Corrupt(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParamSet> {
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad weight-file magic {magic:?}")));
    }
    let mut set = ParamSet::new();
    loop {
        let mut first = [0u8; 4];
        let got = r.read(&mut first)?;
        if got == 0 {
            break;
        }
        read_exact(&mut r, &mut first[got..], "name length")?;
        let len = u32::from_le_bytes(first) as usize;
        if len > 4096 {
            return Err(Error::Corrupt(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut r, &mut name, "name")?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Corrupt("name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Corrupt(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n > 0 && n < (1 << 32))
            .ok_or_else(|| Error::Corrupt(format!("{name}: bad shape {shape:?}")))?;
        let mut bytes = vec![0u8; numel * 8];
        read_exact(&mut r, &mut bytes, &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set.insert(name, Tensor::new(&shape, data)?);
    }
    Ok(set)
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = fs::read(path)?;
    read_params(bytes.as_slice())
}

/// Checks that `loaded` has exactly the names and shapes of `expected`.
pub fn validate_against(loaded: &ParamSet, expected: &ParamSet) -> Result<()> {
    for (name, t) in expected.iter() {
        let got = loaded
            .get(name)
            .map_err(|_| Error::Format(format!("weight file lacks {name:?}")))?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {:?} in file, config expects {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some((extra, _)) = loaded.iter().find(|(n, _)| !expected.contains(n)) {
        return Err(Error::Format(format!(
            "unexpected parameter {extra:?} in weight file"
        )));
    }
    Ok(())
}
