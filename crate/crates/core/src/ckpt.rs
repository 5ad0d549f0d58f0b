//! Checkpoint archive: a flat file of named tensors.
//!
//! Layout (all integers 64-bit little-endian):
//! magic `"ISA4D\0"`, one format-version byte, entry count, then per entry:
//! name length, UTF-8 name bytes, rank, extents, and the tensor data as raw
//! 32-bit little-endian floats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"ISA4D\0";
const VERSION: u8 = 1;

/// Write named tensors to `path`, replacing any existing file.
pub fn save_entries(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every named tensor from a checkpoint written by [`save_entries`].
pub fn load_entries(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("{}: short magic: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            version[0]
        )));
    }
    let count = read_u64(&mut r, path)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: bad name: {e}", path.display())))?;
        let rank = read_u64(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf).map_err(|e| {
            Error::Checkpoint(format!("{}: short data for {name}: {e}", path.display()))
        })?;
        let data: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("{}: truncated: {e}", path.display())))?;
    Ok(u64::from_le_bytes(buf))
}
