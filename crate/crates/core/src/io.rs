//! Binary file formats.
//!
//! STSR tensor blob: bytes 0-3 magic `STSR`, byte 4 version (1), byte 5
//! dtype (0 = float32, 1 = float64), byte 6 ndim (always 5), byte 7
//! reserved (0), then five little-endian u64 extents, then the row-major
//! little-endian payload.
//!
//! STAR checkpoint: bytes 0-3 magic `STAR`, byte 4 version (1), then a
//! little-endian u32 entry count, then per entry a little-endian u16 name
//! length, the UTF-8 name, and an embedded STSR blob.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Shape5, Tensor5};
use std::io::{Read, Write};
use std::path::Path;

const STSR_MAGIC: &[u8; 4] = b"STSR";
const STAR_MAGIC: &[u8; 4] = b"STAR";
const FORMAT_VERSION: u8 = 1;

fn corrupt(path: &str, detail: impl ToString) -> Error {
    Error::Corrupt {
        path: path.to_string(),
        detail: detail.to_string(),
    }
}

/// Writes one tensor as an STSR blob.
pub fn write_stsr(w: &mut impl Write, t: &Tensor5) -> Result<()> {
    let dtype_byte = match t.dtype() {
        Dtype::F32 => 0u8,
        Dtype::F64 => 1u8,
    };
    w.write_all(STSR_MAGIC)?;
    w.write_all(&[FORMAT_VERSION, dtype_byte, 5, 0])?;
    for e in t.shape().dims() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    match t.dtype() {
        Dtype::F32 => {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for &v in t.as_f32()? {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Dtype::F64 => {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for &v in t.as_f64()? {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
    }
    Ok(())
}

/// Reads one STSR blob, consuming exactly its bytes from the stream.
/// `origin` names the source in error messages.
pub fn read_stsr(r: &mut impl Read, origin: &str) -> Result<Tensor5> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header)
        .map_err(|e| corrupt(origin, format!("truncated STSR header: {e}")))?;
    if &header[0..4] != STSR_MAGIC {
        return Err(corrupt(origin, "bad magic, expected STSR"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(corrupt(
            origin,
            format!("unsupported STSR version {}", header[4]),
        ));
    }
    let dtype = match header[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(corrupt(origin, format!("unknown dtype byte {other}"))),
    };
    if header[6] != 5 {
        return Err(corrupt(origin, format!("ndim {} != 5", header[6])));
    }
    if header[7] != 0 {
        return Err(corrupt(origin, "reserved byte not zero"));
    }
    let mut ext = [0u64; 5];
    for e in ext.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|e| corrupt(origin, format!("truncated extents: {e}")))?;
        *e = u64::from_le_bytes(b);
    }
    let dims: Vec<usize> = ext
        .iter()
        .map(|&e| {
            usize::try_from(e).map_err(|_| corrupt(origin, format!("extent {e} exceeds platform")))
        })
        .collect::<Result<_>>()?;
    let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4])
        .map_err(|e| corrupt(origin, format!("invalid shape: {e}")))?;
    let len = shape.volume();
    let elem = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut payload = vec![0u8; len * elem];
    r.read_exact(&mut payload)
        .map_err(|e| corrupt(origin, format!("truncated payload: {e}")))?;
    match dtype {
        Dtype::F32 => {
            let vals: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor5::from_vec_f32(shape, vals)
                .map_err(|e| corrupt(origin, format!("invalid payload: {e}")))
        }
        Dtype::F64 => {
            let vals: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect();
            Tensor5::from_vec_f64(shape, vals)
                .map_err(|e| corrupt(origin, format!("invalid payload: {e}")))
        }
    }
}

/// Saves a tensor to an STSR file.
pub fn save_stsr(path: impl AsRef<Path>, t: &Tensor5) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_stsr(&mut f, t)?;
    f.flush()?;
    Ok(())
}

/// Loads a tensor from an STSR file, rejecting trailing bytes.
pub fn load_stsr(path: impl AsRef<Path>) -> Result<Tensor5> {
    let name = path.as_ref().display().to_string();
    let mut f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let t = read_stsr(&mut f, &name)?;
    let mut rest = [0u8; 1];
    match f.read(&mut rest)? {
        0 => Ok(t),
        _ => Err(corrupt(&name, "trailing bytes after payload")),
    }
}

/// Writes a STAR checkpoint from named tensors, in the given order.
pub fn save_star<'a>(
    path: impl AsRef<Path>,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor5)>,
) -> Result<()> {
    let entries: Vec<(&str, &Tensor5)> = entries.into_iter().collect();
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::InvalidArg("too many checkpoint entries".into()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(STAR_MAGIC)?;
    f.write_all(&[FORMAT_VERSION])?;
    f.write_all(&count.to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len())
            .map_err(|_| Error::InvalidArg(format!("entry name too long: {name}")))?;
        f.write_all(&len.to_le_bytes())?;
        f.write_all(bytes)?;
        write_stsr(&mut f, tensor)?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a STAR checkpoint, preserving entry order; rejects trailing bytes.
pub fn load_star(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor5)>> {
    let name = path.as_ref().display().to_string();
    let mut f = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut header = [0u8; 5];
    f.read_exact(&mut header)
        .map_err(|e| corrupt(&name, format!("truncated STAR header: {e}")))?;
    if &header[0..4] != STAR_MAGIC {
        return Err(corrupt(&name, "bad magic, expected STAR"));
    }
    if header[4] != FORMAT_VERSION {
        return Err(corrupt(
            &name,
            format!("unsupported STAR version {}", header[4]),
        ));
    }
    let mut cnt = [0u8; 4];
    f.read_exact(&mut cnt)
        .map_err(|e| corrupt(&name, format!("truncated entry count: {e}")))?;
    let count = u32::from_le_bytes(cnt);
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let mut nl = [0u8; 2];
        f.read_exact(&mut nl)
            .map_err(|e| corrupt(&name, format!("truncated name length (entry {i}): {e}")))?;
        let nlen = u16::from_le_bytes(nl) as usize;
        let mut nbuf = vec![0u8; nlen];
        f.read_exact(&mut nbuf)
            .map_err(|e| corrupt(&name, format!("truncated name (entry {i}): {e}")))?;
        let ename = String::from_utf8(nbuf)
            .map_err(|_| corrupt(&name, format!("entry {i} name is not UTF-8")))?;
        let tensor = read_stsr(&mut f, &format!("{name}:{ename}"))?;
        entries.push((ename, tensor));
    }
    let mut rest = [0u8; 1];
    match f.read(&mut rest)? {
        0 => Ok(entries),
        _ => Err(corrupt(&name, "trailing bytes after last entry")),
    }
}
