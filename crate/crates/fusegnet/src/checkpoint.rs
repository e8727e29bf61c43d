//! Checkpoint persistence: a binary named-tensor blob plus a plain-text
//! sidecar with the run metadata.
//!
//! Blob layout (all integers little-endian):
//! `magic "FSGT0001" | u32 count | count x (u16 name_len | name utf-8 |
//! u8 ndim | ndim x u64 dims | f64 data row-major)`.

use crate::error::{Error, Result};
use crate::nn::StateDict;
use ndarray::{ArrayD, IxDyn};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FSGT0001";

pub fn write_tensors(path: &Path, tensors: &StateDict) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io_err)?;
    for (name, data) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor name too long: {name}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        let shape = data.shape();
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        let standard = data.as_standard_layout();
        for v in standard.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<StateDict> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a tensor blob (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4).map_err(io_err)?;
    let count = u32::from_le_bytes(buf4) as usize;

    let mut out = StateDict::new();
    for _ in 0..count {
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2).map_err(io_err)?;
        let name_len = u16::from_le_bytes(buf2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not valid utf-8".into()))?;

        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io_err)?;
        let mut dims = Vec::with_capacity(ndim[0] as usize);
        let mut buf8 = [0u8; 8];
        for _ in 0..ndim[0] {
            r.read_exact(&mut buf8).map_err(io_err)?;
            dims.push(u64::from_le_bytes(buf8) as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut buf8).map_err(io_err)?;
            values.push(f64::from_le_bytes(buf8));
        }
        let array = ArrayD::from_shape_vec(IxDyn(&dims), values)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if out.insert(name.clone(), array).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    Ok(out)
}
