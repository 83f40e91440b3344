//! `WOLO` checkpoint files.
//!
//! Layout: magic `WOLO`, u32 LE version, u32 LE tensor count, then per
//! tensor a u16 LE name length, the UTF-8 name, a u8 rank, `rank` u32 LE
//! dims and the row-major payload. Version 1 stores f32 payloads; version 2
//! stores f64 so that a resumed run continues bit-for-bit.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"WOLO";

/// Payload precision, which is also the format version.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn version(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        msg: msg.into(),
    }
}

pub fn write_checkpoint<'a>(
    mut w: impl Write,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    precision: Precision,
) -> Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&precision.version().to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| malformed(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| malformed(format!("rank too large: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| malformed(format!("dimension too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        match precision {
            Precision::F32 => t
                .data()
                .iter()
                .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
            Precision::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|_| malformed(format!("truncated while reading {what}")))?;
    Ok(b)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<ParamStore> {
    if &read_exact::<4>(&mut r, "magic")? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    let width = match version {
        1 => 4,
        2 => 8,
        v => return Err(malformed(format!("unsupported version {v}"))),
    };
    let count = u32::from_le_bytes(read_exact(&mut r, "count")?);
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| malformed("truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| malformed("name is not UTF-8"))?;
        let [rank] = read_exact::<1>(&mut r, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r, "dims")?) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| malformed(format!("{name}: dimensions overflow")))?;
        let mut payload = vec![0u8; n * width];
        r.read_exact(&mut payload)
            .map_err(|_| malformed(format!("{name}: truncated payload")))?;
        let data = if width == 4 {
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        } else {
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        store.add(name, Tensor::new(shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(malformed("trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn save_checkpoint<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    precision: Precision,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, tensors, precision)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_checkpoint(BufReader::new(std::fs::File::open(path)?))
}
