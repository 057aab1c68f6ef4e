//! Flat container of named `f32` arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CPNCKPT\0"
//! version      u32      1
//! count        u32      number of entries
//! per entry:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   dtype      u8       0 = f32 little-endian
//!   ndim       u32
//!   dims       ndim × u64
//!   data       product(dims) × 4 bytes
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CPNCKPT\0";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub tensor: Tensor<f32>,
}

impl NamedArray {
    pub fn new<T: Element>(name: impl Into<String>, tensor: &Tensor<T>) -> Self {
        NamedArray {
            name: name.into(),
            tensor: tensor.cast(),
        }
    }
}

pub fn write_arrays<W: Write>(mut w: W, arrays: &[NamedArray]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for a in arrays {
        let name = a.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(a.tensor.ndim() as u32).to_le_bytes())?;
        for &d in a.tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in a.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_arrays<R: Read>(mut r: R) -> Result<Vec<NamedArray>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Format("entry name is not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(TensorError::Format(format!(
                "entry {name}: unsupported dtype code {}",
                dtype[0]
            )));
        }
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedArray {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, arrays: &[NamedArray]) -> Result<()> {
    write_arrays(BufWriter::new(File::create(path)?), arrays)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<NamedArray>> {
    read_arrays(BufReader::new(File::open(path)?))
}
