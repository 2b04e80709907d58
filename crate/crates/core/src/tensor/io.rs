//! Binary tensor files: `b"TKSG"`, `u8` version, `u32` ndim, `ndim × u32`
//! dims, then the row-major payload as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{io_err, Result, TksgError};

pub const TENSOR_MAGIC: &[u8; 4] = b"TKSG";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor_to<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION])?;
    w.write_all(&(t.ndim() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_tensor_to(&mut w, t).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Parses one tensor from a reader and requires the stream to end there;
/// `origin` only labels errors.
pub fn read_tensor_from<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor> {
    let t = read_record(r, origin)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err(origin))? != 0 {
        return Err(TksgError::TensorFile {
            path: origin.to_path_buf(),
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok(t)
}

fn read_record<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor> {
    let bad = |reason: &str| TksgError::TensorFile {
        path: origin.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut header = [0u8; 9];
    r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
    if &header[..4] != TENSOR_MAGIC {
        return Err(bad("bad magic"));
    }
    if header[4] != TENSOR_VERSION {
        return Err(bad(&format!("unsupported version {}", header[4])));
    }
    let ndim = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    if ndim > 8 {
        return Err(bad(&format!("implausible ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        r.read_exact(&mut d).map_err(|_| bad("truncated dims"))?;
        dims.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(dims, data)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(io_err(path))?;
    read_tensor_from(&mut BufReader::new(f), path)
}

/// Writes several tensors back to back in one file.
pub fn write_tensors(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for t in tensors {
        write_tensor_to(&mut w, t).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a file written by [`write_tensors`].
pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut r = bytes.as_slice();
    let mut out = Vec::new();
    while !r.is_empty() {
        out.push(read_record(&mut r, path)?);
    }
    Ok(out)
}
