//! `FFCK` checkpoint files.
//!
//! Layout (little-endian): magic `FFCK`, version u32, tensor count u32, then
//! per tensor: name length u16, UTF-8 name, dtype code u8, rank u8, dims as
//! u32 each, raw data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// One tensor as stored on disk, before conversion to a working dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u32>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl CheckpointTensor {
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        let values: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        Tensor::new(shape, values).map_err(|e| Error::Checkpoint(format!("`{}`: {e}", self.name)))
    }
}

pub fn write_checkpoint<T: Real>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let count = u32::try_from(params.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name `{}` is too long", p.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[T::DTYPE.code()])?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::Checkpoint("rank exceeds 255".into()))?;
        w.write_all(&[rank])?;
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.value.numel() * T::DTYPE.size_bytes());
        p.value.data().iter().for_each(|&v| v.write_le(&mut buf));
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic: [u8; 4] = read_exact(&mut r, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "tensor count")?);
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let [code] = read_exact::<1>(&mut r, "dtype")?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: unknown dtype code {code}")))?;
        let [rank] = read_exact::<1>(&mut r, "rank")?;
        let mut dims = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = u32::from_le_bytes(read_exact(&mut r, "dims")?);
            numel = numel
                .checked_mul(d as usize)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
            dims.push(d);
        }
        let mut bytes = vec![0u8; numel * dtype.size_bytes()];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Checkpoint(format!("`{name}`: truncated data: {e}")))?;
        out.push(CheckpointTensor { name, dtype, dims, bytes });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}
