//! Tensor file I/O.
//!
//! One tensor per file: an ASCII header line `TFT1 <dtype> <ndim> <ext0> ...`
//! followed by the raw row-major payload in little-endian byte order. The
//! format exists so checkpoints, datasets, and debug dumps round-trip
//! bit-exactly and stay readable from one-liner scripts
//! (`np.fromfile(f, dtype, offset=len(header))`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

const MAGIC: &str = "TFT1";

fn header(dtype: Dtype, shape: &[usize]) -> String {
    let mut h = format!("{MAGIC} {} {}", dtype.name(), shape.len());
    for e in shape {
        h.push(' ');
        h.push_str(&e.to_string());
    }
    h.push('\n');
    h
}

pub(crate) fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<(Dtype, Vec<usize>)> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::format(path_str(path), "truncated header"));
        }
        if byte[0] == b'\n' {
            break;
        }
        if line.len() > 4096 {
            return Err(Error::format(path_str(path), "unterminated header"));
        }
        line.push(byte[0]);
    }
    let line = String::from_utf8(line)
        .map_err(|_| Error::format(path_str(path), "non-ascii header"))?;
    let mut fields = line.split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(Error::format(path_str(path), "bad magic"));
    }
    let dtype = match fields.next() {
        Some("f32") => Dtype::F32,
        Some("f64") => Dtype::F64,
        Some("u8") => Dtype::U8,
        other => {
            return Err(Error::format(
                path_str(path),
                format!("unknown dtype {other:?}"),
            ))
        }
    };
    let ndim: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(path_str(path), "bad ndim"))?;
    let shape: Vec<usize> = fields
        .map(|s| {
            s.parse()
                .map_err(|_| Error::format(path_str(path), format!("bad extent {s:?}")))
        })
        .collect::<Result<_>>()?;
    if shape.len() != ndim {
        return Err(Error::format(
            path_str(path),
            format!("ndim {ndim} but {} extents", shape.len()),
        ));
    }
    Ok((dtype, shape))
}

fn read_payload(path: &Path, r: &mut impl Read, bytes: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; bytes];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path_str(path), "truncated payload"))?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format(path_str(path), "trailing bytes after payload"));
    }
    Ok(buf)
}

/// Writes a float tensor; dtype is taken from `T`.
pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header(T::DTYPE, t.shape()).as_bytes())?;
    let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size_bytes());
    for &v in t.data() {
        v.extend_le_bytes(&mut bytes);
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads a float tensor; fails if the stored dtype is not `T`'s.
pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(path, &mut r)?;
    if dtype != T::DTYPE {
        return Err(Error::format(
            path_str(path),
            format!("dtype is {}, wanted {}", dtype.name(), T::DTYPE.name()),
        ));
    }
    let numel: usize = shape.iter().product();
    let buf = read_payload(path, &mut r, numel * dtype.size_bytes())?;
    let width = T::DTYPE.size_bytes();
    let data: Vec<T> = buf.chunks_exact(width).map(T::from_le_bytes).collect();
    Tensor::new(shape, data)
}

/// Writes a label volume (class indices) as dtype u8.
pub fn write_labels(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::format(
            path_str(path),
            format!("shape {shape:?} wants {numel} bytes, got {}", data.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header(Dtype::U8, shape).as_bytes())?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

/// Reads a label volume written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, shape) = read_header(path, &mut r)?;
    if dtype != Dtype::U8 {
        return Err(Error::format(
            path_str(path),
            format!("dtype is {}, wanted u8", dtype.name()),
        ));
    }
    let numel: usize = shape.iter().product();
    let data = read_payload(path, &mut r, numel)?;
    Ok((shape, data))
}

/// Header peek without loading the payload.
pub fn probe(path: &Path) -> Result<(Dtype, Vec<usize>)> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(path, &mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(7);

        let t32: Tensor<f32> = Tensor::uniform(&[3, 4, 5], -2.0, 2.0, &mut rng);
        let p32 = dir.path().join("a.tft");
        write_tensor(&p32, &t32).unwrap();
        let back32: Tensor<f32> = read_tensor(&p32).unwrap();
        assert_eq!(back32, t32);

        let t64: Tensor<f64> = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut rng);
        let p64 = dir.path().join("b.tft");
        write_tensor(&p64, &t64).unwrap();
        let back64: Tensor<f64> = read_tensor(&p64).unwrap();
        assert_eq!(back64, t64);
    }

    #[test]
    fn label_round_trip_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.tft");
        let data: Vec<u8> = (0..24).map(|i| (i % 4) as u8).collect();
        write_labels(&p, &[2, 3, 4], &data).unwrap();
        let (shape, back) = read_labels(&p).unwrap();
        assert_eq!(shape, vec![2, 3, 4]);
        assert_eq!(back, data);
        assert_eq!(probe(&p).unwrap(), (Dtype::U8, vec![2, 3, 4]));
    }

    #[test]
    fn dtype_mismatch_and_corruption_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tft");
        let t: Tensor<f32> = Tensor::zeros(&[2, 2]);
        write_tensor(&p, &t).unwrap();
        assert!(read_tensor::<f64>(&p).is_err());

        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 1]).unwrap();
        assert!(read_tensor::<f32>(&p).is_err());

        let mut extended = full.clone();
        extended.push(0);
        std::fs::write(&p, &extended).unwrap();
        assert!(read_tensor::<f32>(&p).is_err());

        std::fs::write(&p, b"NOPE 1 1 4\n\0\0\0\0").unwrap();
        assert!(read_tensor::<f32>(&p).is_err());
    }
}
