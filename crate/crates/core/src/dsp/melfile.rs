//! `MEL1` feature files: magic `MEL1`, u32 LE mel-bin count, u32 LE frame
//! count, then `n_mels * n_frames` f32 LE values, frame-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MEL1";

fn malformed(msg: impl Into<String>) -> Error {
    Error::Format {
        kind: "MEL1",
        msg: msg.into(),
    }
}

/// Serializes an `(n_mels, n_frames)` spectrogram.
pub fn write_mel(mut w: impl Write, mel: &Tensor) -> Result<()> {
    let &[n_mels, n_frames] = mel.shape() else {
        return Err(Error::shape("write_mel", &[mel.shape()]));
    };
    w.write_all(MAGIC)?;
    w.write_all(&(n_mels as u32).to_le_bytes())?;
    w.write_all(&(n_frames as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * mel.len());
    for f in 0..n_frames {
        for m in 0..n_mels {
            buf.extend_from_slice(&(mel.data()[m * n_frames + f] as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mel(mut r: impl Read) -> Result<Tensor> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header).map_err(|_| malformed("truncated header"))?;
    if &header[..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let n_mels = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = n_mels
        .checked_mul(n_frames)
        .ok_or_else(|| malformed("dimensions overflow"))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != 4 * count {
        return Err(malformed(format!(
            "expected {} payload bytes, found {}",
            4 * count,
            payload.len()
        )));
    }
    let mut data = vec![0.0; count];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let (f, m) = (i / n_mels, i % n_mels);
        data[m * n_frames + f] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Tensor::new(vec![n_mels, n_frames], data)
}

pub fn save_mel(path: impl AsRef<Path>, mel: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_mel(&mut w, mel)?;
    w.flush()?;
    Ok(())
}

pub fn load_mel(path: impl AsRef<Path>) -> Result<Tensor> {
    read_mel(std::io::BufReader::new(std::fs::File::open(path)?))
}
