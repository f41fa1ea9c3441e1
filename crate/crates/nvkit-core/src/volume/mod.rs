//! Volume/mask data model, intensity windowing, cuboid cropping/stitching,
//! and file IO.
//!
//! Grids are indexed `[z, y, x]` (depth, height, width) with physical voxel
//! spacing `(dz, dy, dx)` in millimeters. All operations here are pure
//! functions over immutable inputs.

mod io;
#[cfg(feature = "nifti")]
mod nifti;

pub use io::{load_mask, load_volume, save_mask, save_volume, DTYPE_F32, DTYPE_F64, DTYPE_U8};
#[cfg(feature = "nifti")]
pub use nifti::load_nifti;

use crate::backbone::ConfidenceMaps;
use crate::error::{NvError, Result};
use crate::sampler::compute_fineness;
use crate::scalar::Real;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// 3D scalar intensity grid with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub data: Array3<T>,
    /// (dz, dy, dx) in millimeters per voxel.
    pub spacing: [f64; 3],
}

/// 3D boolean grid aligned to a [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub data: Array3<bool>,
    pub spacing: [f64; 3],
}

/// A cropped (image, label) training patch.
#[derive(Debug, Clone)]
pub struct CuboidPair<T> {
    pub image: Array3<T>,
    pub label: Array3<bool>,
    /// (z, y, x) voxel offset of the patch in the source volume.
    pub origin: [usize; 3],
    /// Surface-voxel fraction of the patch's airway content, in [0, 1];
    /// zero iff the label contains no airway voxel.
    pub fineness: f64,
}

/// How overlapping patch regions are combined when stitching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// Voxel-wise maximum; favors recall.
    #[default]
    Max,
    /// Voxel-wise mean over covering patches.
    Mean,
}

fn spacing_valid(spacing: &[f64; 3]) -> bool {
    spacing.iter().all(|&s| s.is_finite() && s > 0.0)
}

impl<T: Real> Volume<T> {
    pub fn new(data: Array3<T>, spacing: [f64; 3]) -> Result<Self> {
        if !spacing_valid(&spacing) {
            return Err(NvError::Data(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        if data.is_empty() {
            return Err(NvError::Data("volume must have at least one voxel".into()));
        }
        Ok(Volume { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    /// Checks every voxel is finite.
    pub fn validate_finite(&self) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(NvError::Data(format!(
                "non-finite voxel at flat index {idx}"
            )));
        }
        Ok(())
    }
}

impl BinaryMask {
    pub fn new(data: Array3<bool>, spacing: [f64; 3]) -> Result<Self> {
        if !spacing_valid(&spacing) {
            return Err(NvError::Data(format!(
                "spacing components must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(BinaryMask { data, spacing })
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Alignment check against a paired volume.
    pub fn aligned_with<T: Real>(&self, v: &Volume<T>) -> Result<()> {
        if self.shape() != v.shape() {
            return Err(NvError::Alignment(format!(
                "mask shape {:?} != volume shape {:?}",
                self.shape(),
                v.shape()
            )));
        }
        if self.spacing != v.spacing {
            return Err(NvError::Alignment(format!(
                "mask spacing {:?} != volume spacing {:?}",
                self.spacing, v.spacing
            )));
        }
        Ok(())
    }
}

/// Clamps every voxel into `[lo, hi]` and linearly rescales to `[0, 1]`.
///
/// Spacing and shape are preserved. Idempotent: a second application with the
/// same bounds maps `[0, 1]` data onto itself only when `lo <= 0 < 1 <= hi`,
/// so the canonical idempotence holds for re-application with `(0, 1)` bounds;
/// re-applying with the original HU bounds is NOT the identity. The pipeline
/// applies it exactly once per volume.
pub fn window_intensity<T: Real>(v: &Volume<T>, lo: T, hi: T) -> Result<Volume<T>> {
    if !(lo < hi) {
        return Err(NvError::Contract(format!(
            "window bounds must satisfy lo < hi, got [{lo}, {hi}]"
        )));
    }
    v.validate_finite()?;
    let span = hi - lo;
    let data = v.data.mapv(|x| {
        let c = if x < lo {
            lo
        } else if x > hi {
            hi
        } else {
            x
        };
        (c - lo) / span
    });
    Ok(Volume {
        data,
        spacing: v.spacing,
    })
}

/// Patch origins along one axis: a regular stride grid covering `dim`,
/// with the trailing patch zero-padded rather than shifted.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let n = (dim - patch).div_ceil(stride) + 1;
    (0..n).map(|i| i * stride).collect()
}

/// Copies the `patch`-shaped window at `origin` out of `src`, zero-padding
/// beyond the source bounds.
fn extract_padded<T: Copy + Default>(
    src: &Array3<T>,
    origin: [usize; 3],
    patch: [usize; 3],
) -> Array3<T> {
    let (sd, sh, sw) = src.dim();
    let mut out = Array3::<T>::default((patch[0], patch[1], patch[2]));
    let nz = patch[0].min(sd.saturating_sub(origin[0]));
    let ny = patch[1].min(sh.saturating_sub(origin[1]));
    let nx = patch[2].min(sw.saturating_sub(origin[2]));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                out[[z, y, x]] = src[[origin[0] + z, origin[1] + y, origin[2] + x]];
            }
        }
    }
    out
}

/// Cuts a volume/mask pair into sliding-window patches covering the full
/// volume. Edge patches are zero-padded so patch origins form a regular
/// grid; each pair carries its computed fineness score.
pub fn crop_cuboids<T: Real>(
    v: &Volume<T>,
    m: &BinaryMask,
    patch_shape: [usize; 3],
    stride: [usize; 3],
) -> Result<Vec<CuboidPair<T>>> {
    m.aligned_with(v)?;
    if patch_shape.iter().any(|&p| p == 0) {
        return Err(NvError::Contract("patch dimensions must be >= 1".into()));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(NvError::Contract("stride components must be >= 1".into()));
    }
    let shape = v.shape();
    let oz = axis_origins(shape[0], patch_shape[0], stride[0]);
    let oy = axis_origins(shape[1], patch_shape[1], stride[1]);
    let ox = axis_origins(shape[2], patch_shape[2], stride[2]);
    let mut out = Vec::with_capacity(oz.len() * oy.len() * ox.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                let origin = [z, y, x];
                let image = extract_padded(&v.data, origin, patch_shape);
                let label = extract_padded(&m.data, origin, patch_shape);
                let fineness = compute_fineness(&label);
                out.push(CuboidPair {
                    image,
                    label,
                    origin,
                    fineness,
                });
            }
        }
    }
    Ok(out)
}

/// Reassembles per-patch confidence maps into a whole-volume map.
///
/// Patches may extend past `target_shape` (padded inference patches get
/// clipped). Overlaps combine according to `rule`; any voxel left uncovered
/// is a coverage error.
pub fn stitch_cuboids<T: Real>(
    patches: &[(ConfidenceMaps<T>, [usize; 3])],
    target_shape: [usize; 3],
    rule: FusionRule,
) -> Result<ConfidenceMaps<T>> {
    let dims = (target_shape[0], target_shape[1], target_shape[2]);
    let mut airway = Array3::<T>::zeros(dims);
    let mut background = Array3::<T>::zeros(dims);
    let mut cover = Array3::<u32>::zeros(dims);
    for (maps, origin) in patches {
        let p = maps.shape();
        let nz = p[0].min(target_shape[0].saturating_sub(origin[0]));
        let ny = p[1].min(target_shape[1].saturating_sub(origin[1]));
        let nx = p[2].min(target_shape[2].saturating_sub(origin[2]));
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let t = [origin[0] + z, origin[1] + y, origin[2] + x];
                    let aw = maps.airway[[z, y, x]];
                    let bg = maps.background[[z, y, x]];
                    match rule {
                        FusionRule::Max => {
                            if cover[t] == 0 || aw > airway[t] {
                                airway[t] = aw;
                            }
                            if cover[t] == 0 || bg > background[t] {
                                background[t] = bg;
                            }
                        }
                        FusionRule::Mean => {
                            airway[t] += aw;
                            background[t] += bg;
                        }
                    }
                    cover[t] += 1;
                }
            }
        }
    }
    if let Some((idx, _)) = cover.indexed_iter().find(|(_, &c)| c == 0) {
        return Err(NvError::Coverage(format!(
            "voxel {idx:?} not covered by any patch"
        )));
    }
    if rule == FusionRule::Mean {
        ndarray::Zip::from(&mut airway)
            .and(&cover)
            .for_each(|a, &c| *a = *a / T::of(c as f64));
        ndarray::Zip::from(&mut background)
            .and(&cover)
            .for_each(|b, &c| *b = *b / T::of(c as f64));
    }
    ConfidenceMaps::new(airway, background)
}
