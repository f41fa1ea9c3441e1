//! Single-file volume container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   6 bytes  "NVKIT1"
//! dims    3 x u32  (D, H, W)
//! spacing 3 x f64  (dz, dy, dx) millimeters
//! dtype   1 byte   0x01 = u8 mask, 0x02 = f32, 0x03 = f64
//! data    row-major voxels, z slowest, x fastest
//! ```

use super::{BinaryMask, Volume};
use crate::error::{NvError, Result};
use crate::scalar::Real;
use ndarray::Array3;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 6] = b"NVKIT1";
pub const DTYPE_U8: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x02;
pub const DTYPE_F64: u8 = 0x03;

struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: u8,
}

fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|e| NvError::parse("magic", e.to_string()))?;
    if &magic != MAGIC {
        return Err(NvError::parse(
            "magic",
            format!("expected {MAGIC:?}, got {magic:?}"),
        ));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|e| NvError::parse("dims", e.to_string()))?;
        let v = u32::from_le_bytes(b);
        if v == 0 {
            return Err(NvError::parse("dims", format!("dimension {i} is zero")));
        }
        *d = v as usize;
    }
    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)
            .map_err(|e| NvError::parse("spacing", e.to_string()))?;
        *s = f64::from_le_bytes(b);
        if !(s.is_finite() && *s > 0.0) {
            return Err(NvError::parse(
                "spacing",
                format!("component {i} must be positive and finite, got {s}"),
            ));
        }
    }
    let mut dt = [0u8; 1];
    r.read_exact(&mut dt)
        .map_err(|e| NvError::parse("dtype", e.to_string()))?;
    Ok(Header {
        dims,
        spacing,
        dtype: dt[0],
    })
}

fn write_header(w: &mut impl Write, dims: [usize; 3], spacing: [f64; 3], dtype: u8) -> Result<()> {
    w.write_all(MAGIC)?;
    for d in dims {
        let v = u32::try_from(d)
            .map_err(|_| NvError::Data(format!("dimension {d} exceeds u32 range")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[dtype])?;
    Ok(())
}

/// Saves a volume; dtype follows the scalar type (`f32` or `f64`).
pub fn save_volume<T: Real>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dtype = if std::mem::size_of::<T>() == 4 {
        DTYPE_F32
    } else {
        DTYPE_F64
    };
    write_header(&mut w, v.shape(), v.spacing, dtype)?;
    match dtype {
        DTYPE_F32 => {
            for &x in v.data.iter() {
                w.write_all(&(x.to_f32().unwrap()).to_le_bytes())?;
            }
        }
        _ => {
            for &x in v.data.iter() {
                w.write_all(&x.to_f64_c().to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a volume, converting stored voxels into the requested scalar type.
pub fn load_volume<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let mut flat: Vec<T> = Vec::with_capacity(n);
    match h.dtype {
        DTYPE_F32 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)
                .map_err(|e| NvError::parse("data", e.to_string()))?;
            for c in buf.chunks_exact(4) {
                flat.push(T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64));
            }
        }
        DTYPE_F64 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)
                .map_err(|e| NvError::parse("data", e.to_string()))?;
            for c in buf.chunks_exact(8) {
                flat.push(T::of(f64::from_le_bytes(c.try_into().unwrap())));
            }
        }
        other => {
            return Err(NvError::parse(
                "dtype",
                format!("expected volume dtype f32/f64, got code {other:#04x}"),
            ))
        }
    }
    let data = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), flat)
        .map_err(|e| NvError::parse("data", e.to_string()))?;
    Volume::new(data, h.spacing)
}

/// Saves a binary mask with dtype u8.
pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, m.shape(), m.spacing, DTYPE_U8)?;
    for &b in m.data.iter() {
        w.write_all(&[u8::from(b)])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a binary mask; voxel values other than 0/1 are rejected.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let mut r = BufReader::new(File::open(path)?);
    let h = read_header(&mut r)?;
    if h.dtype != DTYPE_U8 {
        return Err(NvError::parse(
            "dtype",
            format!("expected mask dtype u8 (0x01), got code {:#04x}", h.dtype),
        ));
    }
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| NvError::parse("data", e.to_string()))?;
    if let Some(idx) = buf.iter().position(|&b| b > 1) {
        return Err(NvError::Data(format!(
            "mask voxel at flat index {idx} has value {} (want 0/1)",
            buf[idx]
        )));
    }
    let flat: Vec<bool> = buf.into_iter().map(|b| b == 1).collect();
    let data = Array3::from_shape_vec((h.dims[0], h.dims[1], h.dims[2]), flat)
        .map_err(|e| NvError::parse("data", e.to_string()))?;
    BinaryMask::new(data, h.spacing)
}
