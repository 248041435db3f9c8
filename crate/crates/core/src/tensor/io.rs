//! Binary tensor files: `"ATSR"`, u32 LE rank, rank x u32 LE dims, then the
//! row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATSR";

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::Format {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("missing ATSR magic"));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(bad("implausible rank"));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<std::io::Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(|_| bad("truncated payload"))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn save<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor<f32>> {
    read_tensor(&mut BufReader::new(File::open(path)?), path)
}
