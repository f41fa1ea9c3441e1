//! Read-only NIfTI-1 import (`.nii` / `.nii.gz`), feature-gated.
//!
//! Supports single-file little-endian NIfTI-1 with scalar datatypes
//! uint8/int16/int32/float32/float64 and applies `scl_slope`/`scl_inter`
//! when set. Everything else is rejected with the offending field named.

use super::Volume;
use crate::error::{NvError, Result};
use crate::scalar::Real;
use flate2::read::GzDecoder;
use ndarray::Array3;
use std::fs::File;
use std::io::Read;
use std::path::Path;

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}
fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}
fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Loads a NIfTI-1 volume. Axis order is converted from NIfTI's
/// x-fastest layout to this crate's `[z, y, x]` grids.
pub fn load_nifti<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    let f = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(f).read_to_end(&mut bytes)?;
    } else {
        let mut f = f;
        f.read_to_end(&mut bytes)?;
    }
    if bytes.len() < 352 {
        return Err(NvError::parse("sizeof_hdr", "file shorter than header"));
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != 348 {
        return Err(NvError::parse(
            "sizeof_hdr",
            format!("expected 348 (little-endian NIfTI-1), got {sizeof_hdr}"),
        ));
    }
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" {
        return Err(NvError::parse(
            "magic",
            format!("expected single-file magic n+1, got {magic:?}"),
        ));
    }
    let ndim = le_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(NvError::parse("dim[0]", format!("bad rank {ndim}")));
    }
    let nx = le_i16(&bytes, 42).max(1) as usize;
    let ny = le_i16(&bytes, 44).max(1) as usize;
    let nz = le_i16(&bytes, 46).max(1) as usize;
    for i in 4..=ndim as usize {
        let n = le_i16(&bytes, 40 + 2 * i);
        if n > 1 {
            return Err(NvError::parse(
                &format!("dim[{i}]"),
                format!("only scalar 3D volumes supported, dim[{i}] = {n}"),
            ));
        }
    }
    let datatype = le_i16(&bytes, 70);
    let dx = le_f32(&bytes, 80) as f64; // pixdim[1]
    let dy = le_f32(&bytes, 84) as f64;
    let dz = le_f32(&bytes, 88) as f64;
    let vox_offset = le_f32(&bytes, 108) as usize;
    let scl_slope = le_f32(&bytes, 112) as f64;
    let scl_inter = le_f32(&bytes, 116) as f64;
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0, 0.0)
    } else {
        (scl_slope, scl_inter)
    };

    let n = nx * ny * nz;
    let bpv: usize = match datatype {
        2 => 1,  // uint8
        4 => 2,  // int16
        8 => 4,  // int32
        16 => 4, // float32
        64 => 8, // float64
        other => {
            return Err(NvError::parse(
                "datatype",
                format!("unsupported NIfTI datatype code {other}"),
            ))
        }
    };
    if bytes.len() < vox_offset + n * bpv {
        return Err(NvError::parse(
            "vox_offset",
            format!(
                "data section truncated: need {} bytes at offset {vox_offset}, file has {}",
                n * bpv,
                bytes.len()
            ),
        ));
    }
    let raw = &bytes[vox_offset..vox_offset + n * bpv];
    let read_at = |i: usize| -> f64 {
        let off = i * bpv;
        match datatype {
            2 => raw[off] as f64,
            4 => le_i16(raw, off) as f64,
            8 => le_i32(raw, off) as f64,
            16 => le_f32(raw, off) as f64,
            _ => f64::from_le_bytes(raw[off..off + 8].try_into().unwrap()),
        }
    };
    // NIfTI stores x fastest; emit [z, y, x].
    let mut flat: Vec<T> = Vec::with_capacity(n);
    for i in 0..n {
        flat.push(T::of(read_at(i) * slope + inter));
    }
    let data = Array3::from_shape_vec((nz, ny, nx), flat)
        .map_err(|e| NvError::parse("data", e.to_string()))?;
    let spacing = [
        if dz > 0.0 { dz } else { 1.0 },
        if dy > 0.0 { dy } else { 1.0 },
        if dx > 0.0 { dx } else { 1.0 },
    ];
    Volume::new(data, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_nii(datatype: i16, data: &[u8], dims: [i16; 3], pixdim: [f32; 3]) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        h[42..44].copy_from_slice(&dims[2].to_le_bytes()); // nx
        h[44..46].copy_from_slice(&dims[1].to_le_bytes()); // ny
        h[46..48].copy_from_slice(&dims[0].to_le_bytes()); // nz
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        h[80..84].copy_from_slice(&pixdim[2].to_le_bytes()); // dx
        h[84..88].copy_from_slice(&pixdim[1].to_le_bytes());
        h[88..92].copy_from_slice(&pixdim[0].to_le_bytes());
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(data);
        h
    }

    #[test]
    fn loads_uint8_volume_with_axis_conversion() {
        // 2 x 1 x 3 (z, y, x): x fastest in file order.
        let bytes = tiny_nii(2, &[1, 2, 3, 4, 5, 6], [2, 1, 3], [2.0, 1.0, 0.5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, bytes).unwrap();
        let v: Volume<f32> = load_nifti(&p).unwrap();
        assert_eq!(v.shape(), [2, 1, 3]);
        assert_eq!(v.data[[0, 0, 0]], 1.0);
        assert_eq!(v.data[[0, 0, 2]], 3.0);
        assert_eq!(v.data[[1, 0, 0]], 4.0);
        assert_eq!(v.spacing, [2.0, 1.0, 0.5]);
    }

    #[test]
    fn rejects_unknown_datatype() {
        let bytes = tiny_nii(128, &[0; 8], [1, 1, 1], [1.0, 1.0, 1.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, bytes).unwrap();
        let err = load_nifti::<f32>(&p).unwrap_err();
        assert!(err.to_string().contains("datatype"));
    }
}
