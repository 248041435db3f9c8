//! Binary netpbm: 8-bit P6 color images and P5 label maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantizes `[0, 1]` floats to bytes: clamp, scale by 255, round half to even.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round_ties_even() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// Writes a `[3, H, W]` image in `[0, 1]` as P6.
pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "write_ppm",
            left: s.to_vec(),
            right: vec![3, 0, 0],
        });
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut bytes = header("P6", w, h);
    bytes.reserve(3 * plane);
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(d[c * plane + p]));
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            left: vec![height, width],
            right: vec![values.len()],
        });
    }
    let mut bytes = header("P5", width, height);
    bytes.extend_from_slice(values);
    fs::write(path, bytes)?;
    Ok(())
}

struct Parsed<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload: &'a [u8],
}

fn parse<'a>(bytes: &'a [u8], path: &Path) -> Result<Parsed<'a>> {
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    if fields[2] != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    Ok(Parsed {
        magic,
        width: fields[0],
        height: fields[1],
        payload: bytes.get(pos..).unwrap_or(&[]),
    })
}

/// Reads a P6 file into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let p = parse(&bytes, path)?;
    let plane = p.width * p.height;
    if &p.magic != b"P6" || p.payload.len() < 3 * plane {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "expected a complete binary P6 raster".into(),
        });
    }
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in p.payload[..3 * plane].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, p.height, p.width], data)
}

/// Reads a P5 file; returns `(width, height, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let p = parse(&bytes, path)?;
    let plane = p.width * p.height;
    if &p.magic != b"P5" || p.payload.len() < plane {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "expected a complete binary P5 raster".into(),
        });
    }
    Ok((p.width, p.height, p.payload[..plane].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_is_half_to_even() {
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn ppm_and_pgm_roundtrip_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(vec![3, 2, 3], |i| i as f32 / 17.0);
        let path = dir.path().join("a.ppm");
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);

        let pgm = dir.path().join("a.pgm");
        std::fs::write(&pgm, b"P5\n# labels\n3 1\n255\n\x00\x01\x02").unwrap();
        assert_eq!(read_pgm(&pgm).unwrap(), (3, 1, vec![0, 1, 2]));
    }
}
