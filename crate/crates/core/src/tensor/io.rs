//! MCLT binary tensor container.
//!
//! Layout: magic `MCLT`, u8 version (1), u8 dtype code (0 = f32), u8 ndim,
//! `ndim` little-endian u32 dims, then the row-major little-endian f32
//! payload. One tensor per file; loads are all-or-nothing.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MCLT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
const MAX_NDIM: u8 = 8;

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&[VERSION, DTYPE_F32, t.dims().len() as u8]).map_err(io_err)?;
    for &d in t.dims() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)?;
    w.flush().map_err(io_err)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 7];
    read_exact(path, &mut r, &mut header)?;
    if header[0..4] != MAGIC {
        return Err(Error::container(path, format!("bad magic {:?}", &header[0..4])));
    }
    if header[4] != VERSION {
        return Err(Error::container(path, format!("unsupported version {}", header[4])));
    }
    if header[5] != DTYPE_F32 {
        return Err(Error::container(path, format!("unsupported dtype code {}", header[5])));
    }
    let ndim = header[6];
    if ndim > MAX_NDIM {
        return Err(Error::container(path, format!("ndim {ndim} exceeds limit {MAX_NDIM}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut numel: u64 = 1;
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        read_exact(path, &mut r, &mut b)?;
        let d = u32::from_le_bytes(b);
        if d == 0 {
            return Err(Error::container(path, "zero-sized dimension"));
        }
        numel = numel.saturating_mul(d as u64);
        dims.push(d as usize);
    }
    if numel > (1 << 31) {
        return Err(Error::container(path, format!("payload of {numel} elements is implausible")));
    }
    let mut payload = vec![0u8; numel as usize * 4];
    read_exact(path, &mut r, &mut payload)?;
    let mut tail = [0u8; 1];
    match r.read(&mut tail) {
        Ok(0) => {}
        Ok(_) => return Err(Error::container(path, "trailing bytes after payload")),
        Err(e) => return Err(Error::io(path, e)),
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
        .map_err(|e| Error::container(path, format!("invalid tensor contents: {e}")))
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::container(path, "truncated file")
        } else {
            Error::io(path, e)
        }
    })
}
