//! Little-endian binary encoding of tensors and named parameter blocks.
//!
//! A tensor is written as `rank: u8`, `rank × dim: u64`, then `numel × f32`.
//! A parameter block is `count: u32` followed, per parameter, by
//! `name_len: u16`, the UTF-8 name, and the tensor.
//!
//! Embedder checkpoints are `"DCEB" | version: u32 | block`. Diffusion
//! checkpoints are `"DCDF" | version: u32 | sections: u32` followed by
//! `tag: [u8; 4] | block` per section.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const EMBEDDER_MAGIC: &[u8; 4] = b"DCEB";
pub const DIFFUSION_MAGIC: &[u8; 4] = b"DCDF";

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_magic<R: Read>(r: &mut R, expected: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != expected {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

pub fn read_version<R: Read>(r: &mut R) -> Result<()> {
    let v = read_u32(r)?;
    if v != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::format("tensor rank exceeds 255"))?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = u64::from_le_bytes(b);
        if d == 0 || d > (1 << 32) {
            return Err(Error::format(format!("implausible dimension {d}")));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format(format!("bad tensor payload: {e}")))
}

/// Writes the parameters whose names start with `prefix`.
pub fn write_block<W: Write>(w: &mut W, params: &ParamSet, prefix: &str) -> Result<()> {
    let selected: Vec<_> = params.iter().filter(|(_, p)| p.name.starts_with(prefix)).collect();
    write_u32(w, selected.len() as u32)?;
    for (_, p) in selected {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format("parameter name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        write_tensor(w, &p.value)?;
    }
    Ok(())
}

pub fn read_block<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut lb = [0u8; 2];
        r.read_exact(&mut lb)?;
        let mut name = vec![0u8; u16::from_le_bytes(lb) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("parameter name is not UTF-8"))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

/// Copies loaded tensors into an existing parameter set, matching by name
/// and shape.
pub fn assign(params: &mut ParamSet, loaded: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in loaded {
        let id = params.id(name).map_err(|_| Error::format(format!("unexpected parameter {name:?}")))?;
        let p = params.get_mut(id);
        if p.value.shape() != t.shape() {
            return Err(Error::format(format!(
                "parameter {name:?} has shape {:?}, checkpoint holds {:?}",
                p.value.shape(),
                t.shape()
            )));
        }
        p.value.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn lookup<'a>(block: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    block
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::format(format!("checkpoint lacks {name:?}")))
}
