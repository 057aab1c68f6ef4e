//! Descriptor files written by `cpn embed`.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "CPNDESC\0"
//! count   u64      number of rows
//! dim     u64      values per row
//! dtype   u8       0 = f32 little-endian
//! rows    count × dim × 4 bytes, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};

pub const MAGIC: &[u8; 8] = b"CPNDESC\0";
const DTYPE_F32: u8 = 0;

pub fn write_descriptors<W: Write>(mut w: W, rows: &[Vec<f32>]) -> Result<()> {
    let dim = rows.first().map_or(0, Vec::len);
    ensure!(rows.iter().all(|r| r.len() == dim), "descriptor rows differ in length");
    w.write_all(MAGIC)?;
    w.write_all(&(rows.len() as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    for v in rows.iter().flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_descriptors<R: Read>(mut r: R) -> Result<Vec<Vec<f32>>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).context("descriptor header truncated")?;
    ensure!(&magic == MAGIC, "not a descriptor file");
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let count = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let dim = u64::from_le_bytes(word) as usize;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        bail!("unsupported descriptor element type {}", dtype[0]);
    }
    let mut rows = Vec::with_capacity(count);
    let mut buf = vec![0u8; dim * 4];
    for i in 0..count {
        r.read_exact(&mut buf).with_context(|| format!("descriptor row {i} truncated"))?;
        rows.push(
            buf.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    Ok(rows)
}

pub fn save(path: impl AsRef<Path>, rows: &[Vec<f32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_descriptors(&mut w, rows)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Vec<f32>>> {
    read_descriptors(BufReader::new(File::open(path)?))
}
