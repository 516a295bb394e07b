//! Little-endian tensor container shared by model checkpoints and dataset caches.
//!
//! Layout: magic `AMXM`, format version `u32`, spec string as `u32` byte
//! length plus UTF-8 bytes, then tensors until end of file, each as rank
//! `u32`, `rank` dims as `u32`, and the raw `f32` values.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::autodiff::{Scalar, Tensor};

pub const CONTAINER_MAGIC: [u8; 4] = *b"AMXM";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an AMXM container (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container truncated: {0}")]
    Truncated(&'static str),
    #[error("spec string is not UTF-8")]
    Utf8,
    #[error("tensor dimension does not fit in u32")]
    DimOverflow,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_container<W: Write, T: Scalar>(
    mut w: W,
    spec: &str,
    tensors: &[Tensor<T>],
) -> Result<(), CheckpointError> {
    w.write_all(&CONTAINER_MAGIC)?;
    put_u32(&mut w, CONTAINER_VERSION)?;
    put_u32(&mut w, u32::try_from(spec.len()).map_err(|_| CheckpointError::DimOverflow)?)?;
    w.write_all(spec.as_bytes())?;
    for t in tensors {
        put_u32(&mut w, t.rank() as u32)?;
        for &d in t.shape() {
            put_u32(&mut w, u32::try_from(d).map_err(|_| CheckpointError::DimOverflow)?)?;
        }
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::DimOverflow)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_container<R: Read>(mut r: R) -> Result<(String, Vec<Tensor<f32>>), CheckpointError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != CONTAINER_MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = c.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = c.u32("spec length")? as usize;
    let spec = std::str::from_utf8(c.take(len, "spec")?)
        .map_err(|_| CheckpointError::Utf8)?
        .to_owned();
    let mut tensors = Vec::new();
    while c.pos < buf.len() {
        let rank = c.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32("dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::DimOverflow)?;
        let raw = c.take(n.checked_mul(4).ok_or(CheckpointError::DimOverflow)?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(shape, data).expect("length computed from shape"));
    }
    Ok((spec, tensors))
}
