//! Synthetic airway-tree phantoms with exact ground truth.
//!
//! A phantom is a binary branching tree of capsule segments rasterized into a
//! volume: dark lumen, bright wall, mid-level background, additive Gaussian
//! noise, in HU-like units so the standard intensity window applies. The
//! generator also emits the exact centerline skeleton, per-branch generation
//! indices, and analytic lengths/radii, which downstream metric tests use as
//! oracles.

use crate::error::{NvError, Result};
use crate::metrics::{Branch, TreeSkeleton};
use crate::scalar::Real;
use crate::volume::{BinaryMask, Volume};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Intensity levels of the three-phase tissue model, HU-like units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityModel {
    pub lumen: f64,
    pub wall: f64,
    pub background: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        IntensityModel {
            lumen: -950.0,
            wall: 150.0,
            background: -100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Deepest generation index; 0 is a single straight tube.
    pub max_generation: usize,
    /// Root (trachea surrogate) lumen radius in voxels.
    pub root_radius: f64,
    /// Child/parent radius ratio, in (0, 1).
    pub radius_ratio: f64,
    /// Child/parent length ratio, in (0, 1].
    pub length_ratio: f64,
    /// Half-opening angle at a bifurcation, degrees in (0, 90).
    pub branch_angle: f64,
    /// Volume shape (D, H, W).
    pub volume_shape: [usize; 3],
    /// Additive Gaussian noise, HU-like units, >= 0.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Random jitter of child angles/lengths, in [0, 1).
    pub asymmetry: f64,
    /// Bright wall shell thickness in voxels.
    pub wall_thickness: f64,
    /// Root segment length in voxels; 0 derives it from the volume depth.
    pub root_length: f64,
    /// Voxel spacing (dz, dy, dx), mm.
    pub spacing: [f64; 3],
    pub intensity: IntensityModel,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            max_generation: 3,
            root_radius: 5.0,
            radius_ratio: 0.72,
            length_ratio: 0.78,
            branch_angle: 30.0,
            volume_shape: [64, 128, 128],
            noise_sigma: 40.0,
            seed: 0,
            asymmetry: 0.15,
            wall_thickness: 1.5,
            root_length: 0.0,
            spacing: [1.0, 1.0, 1.0],
            intensity: IntensityModel::default(),
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: String| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(NvError::Config(msg))
            }
        };
        c(self.root_radius > 0.0, "root_radius must be > 0".into())?;
        c(
            self.radius_ratio > 0.0 && self.radius_ratio < 1.0,
            "radius_ratio must be in (0, 1)".into(),
        )?;
        c(
            self.length_ratio > 0.0 && self.length_ratio <= 1.0,
            "length_ratio must be in (0, 1]".into(),
        )?;
        c(
            self.branch_angle > 0.0 && self.branch_angle < 90.0,
            "branch_angle must be in (0, 90) degrees".into(),
        )?;
        c(
            self.volume_shape.iter().all(|&d| d >= 8),
            "volume_shape components must be >= 8".into(),
        )?;
        c(self.noise_sigma >= 0.0, "noise_sigma must be >= 0".into())?;
        c(
            (0.0..1.0).contains(&self.asymmetry),
            "asymmetry must be in [0, 1)".into(),
        )?;
        c(self.wall_thickness >= 0.0, "wall_thickness must be >= 0".into())?;
        c(
            self.spacing.iter().all(|&s| s > 0.0),
            "spacing must be positive".into(),
        )?;
        let min_radius = self.root_radius * self.radius_ratio.powi(self.max_generation as i32);
        c(
            min_radius >= 1.0,
            format!("radius at max_generation is {min_radius:.2} voxels; must stay >= 1"),
        )?;
        Ok(())
    }
}

/// One capsule segment of the tree, in voxel coordinates (z, y, x).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub generation: usize,
    /// Index of the parent segment, or `usize::MAX` for the root.
    pub parent: usize,
}

/// Per-branch sidecar record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchMeta {
    pub generation: usize,
    pub length_mm: f64,
    pub radius_voxels: f64,
}

/// Sidecar metadata used as a metric oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomMeta {
    pub seed: u64,
    pub branch_count: usize,
    pub max_generation: usize,
    /// Total centerline length, mm.
    pub total_length_mm: f64,
    pub branches: Vec<BranchMeta>,
    pub volume_shape: [usize; 3],
    pub spacing: [f64; 3],
}

/// A generated case: the volume, its exact mask and centerline, per-branch
/// generations, the segment geometry, and the oracle metadata.
#[derive(Debug, Clone)]
pub struct PhantomCase<T> {
    pub volume: Volume<T>,
    pub mask: BinaryMask,
    pub skeleton: TreeSkeleton,
    /// Generation index per skeleton branch (0 = root tube).
    pub generation_map: Vec<usize>,
    pub segments: Vec<Segment>,
    pub meta: PhantomMeta,
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Orthonormal basis perpendicular to `d`.
fn perp_basis(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if d[0].abs() < 0.9 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let u = normalize([
        d[1] * pick[2] - d[2] * pick[1],
        d[2] * pick[0] - d[0] * pick[2],
        d[0] * pick[1] - d[1] * pick[0],
    ]);
    let v = [
        d[1] * u[2] - d[2] * u[1],
        d[2] * u[0] - d[0] * u[2],
        d[0] * u[1] - d[1] * u[0],
    ];
    (u, v)
}

struct Pending {
    parent: usize,
    dir: [f64; 3],
    length: f64,
    radius: f64,
    generation: usize,
    azimuth: f64,
}

/// Builds segment geometry; lengths are later rescaled to fit the volume.
fn build_tree(cfg: &PhantomConfig, rng: &mut ChaCha12Rng) -> Vec<Segment> {
    let root_len = if cfg.root_length > 0.0 {
        cfg.root_length
    } else {
        0.28 * cfg.volume_shape[0] as f64
    };
    let start = [
        cfg.root_radius + cfg.wall_thickness + 2.0,
        cfg.volume_shape[1] as f64 / 2.0,
        cfg.volume_shape[2] as f64 / 2.0,
    ];
    let mut segs: Vec<Segment> = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(Pending {
        parent: usize::MAX,
        dir: [1.0, 0.0, 0.0],
        length: root_len,
        radius: cfg.root_radius,
        generation: 0,
        azimuth: rng.gen_range(0.0..std::f64::consts::TAU),
    });
    while let Some(p) = queue.pop_front() {
        let begin = if p.parent == usize::MAX {
            start
        } else {
            segs[p.parent].end
        };
        let end = [
            begin[0] + p.dir[0] * p.length,
            begin[1] + p.dir[1] * p.length,
            begin[2] + p.dir[2] * p.length,
        ];
        let idx = segs.len();
        segs.push(Segment {
            start: begin,
            end,
            radius: p.radius,
            generation: p.generation,
            parent: p.parent,
        });
        if p.generation >= cfg.max_generation {
            continue;
        }
        let (u, v) = perp_basis(p.dir);
        // The bifurcation plane advances ~90 degrees per generation with
        // jitter, so the tree fills three dimensions.
        let azimuth = p.azimuth
            + std::f64::consts::FRAC_PI_2
            + rng.gen_range(-0.4..0.4) * (1.0 + cfg.asymmetry);
        let alpha = cfg.branch_angle.to_radians();
        for side in 0..2 {
            let phi = azimuth + side as f64 * std::f64::consts::PI;
            let jitter_a = 1.0 + cfg.asymmetry * rng.gen_range(-1.0..1.0);
            let jitter_l = 1.0 + cfg.asymmetry * rng.gen_range(-1.0..1.0);
            let a = alpha * jitter_a;
            let lateral = [
                phi.cos() * u[0] + phi.sin() * v[0],
                phi.cos() * u[1] + phi.sin() * v[1],
                phi.cos() * u[2] + phi.sin() * v[2],
            ];
            let dir = normalize([
                a.cos() * p.dir[0] + a.sin() * lateral[0],
                a.cos() * p.dir[1] + a.sin() * lateral[1],
                a.cos() * p.dir[2] + a.sin() * lateral[2],
            ]);
            queue.push_back(Pending {
                parent: idx,
                dir,
                length: p.length * cfg.length_ratio * jitter_l,
                radius: p.radius * cfg.radius_ratio,
                generation: p.generation + 1,
                azimuth,
            });
        }
    }
    segs
}

/// Uniformly rescales segment lengths about the root start so the tree plus
/// its wall fits inside the volume with a one-voxel margin.
fn fit_tree(cfg: &PhantomConfig, segs: &mut [Segment]) -> Result<f64> {
    let root_start = segs[0].start;
    let margin = 1.0;
    let mut scale = 1.0f64;
    for axis in 0..3 {
        let hi_bound = cfg.volume_shape[axis] as f64 - 1.0 - margin;
        let lo_bound = margin;
        for s in segs.iter() {
            let pad = s.radius + cfg.wall_thickness;
            for p in [s.start, s.end] {
                let offset = p[axis] - root_start[axis];
                if offset > 0.0 {
                    let avail = hi_bound - root_start[axis] - pad;
                    if avail <= 0.0 {
                        return Err(NvError::Config(format!(
                            "root placement leaves no room on axis {axis}"
                        )));
                    }
                    scale = scale.min(avail / offset);
                } else if offset < 0.0 {
                    let avail = root_start[axis] - lo_bound - pad;
                    if avail <= 0.0 {
                        return Err(NvError::Config(format!(
                            "root placement leaves no room on axis {axis}"
                        )));
                    }
                    scale = scale.min(avail / (-offset));
                } else if root_start[axis] - pad < lo_bound
                    || root_start[axis] + pad > hi_bound
                {
                    return Err(NvError::Config(format!(
                        "segment radius exceeds volume on axis {axis}"
                    )));
                }
            }
        }
    }
    let scale = scale.min(1.0);
    let rescale = |p: [f64; 3]| {
        [
            root_start[0] + (p[0] - root_start[0]) * scale,
            root_start[1] + (p[1] - root_start[1]) * scale,
            root_start[2] + (p[2] - root_start[2]) * scale,
        ]
    };
    for s in segs.iter_mut() {
        s.start = rescale(s.start);
        s.end = rescale(s.end);
    }
    let min_len = segs.iter().map(seg_len).fold(f64::INFINITY, f64::min);
    if min_len < 3.0 {
        return Err(NvError::Config(format!(
            "tree cannot fit: shrunken terminal segments are {min_len:.2} voxels long (need >= 3)"
        )));
    }
    Ok(scale)
}

fn seg_len(s: &Segment) -> f64 {
    ((s.end[0] - s.start[0]).powi(2)
        + (s.end[1] - s.start[1]).powi(2)
        + (s.end[2] - s.start[2]).powi(2))
    .sqrt()
}

/// Approximate closest axis-to-axis distance between two segments, by
/// sampling along the first.
fn seg_seg_distance(a: &Segment, b: &Segment) -> f64 {
    let n = 24;
    let mut best = f64::INFINITY;
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let p = [
            a.start[0] + (a.end[0] - a.start[0]) * t,
            a.start[1] + (a.end[1] - a.start[1]) * t,
            a.start[2] + (a.end[2] - a.start[2]) * t,
        ];
        best = best.min(capsule_distance(p, b.start, b.end));
    }
    best
}

/// True when two non-adjacent branches come close enough for their
/// rasterized tubes to touch or merge.
fn has_collisions(segs: &[Segment]) -> bool {
    for i in 0..segs.len() {
        for j in (i + 1)..segs.len() {
            let a = &segs[i];
            let b = &segs[j];
            // Parent/child and sibling pairs legitimately meet at junctions.
            let related = b.parent == i
                || a.parent == j
                || (a.parent != usize::MAX && a.parent == b.parent);
            if related {
                continue;
            }
            let clearance = a.radius + b.radius + 2.2;
            if seg_seg_distance(a, b).min(seg_seg_distance(b, a)) < clearance {
                return true;
            }
        }
    }
    false
}

/// Distance from point `p` to segment `ab`.
fn capsule_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt()
}

/// Marks voxels within `radius` of segment `ab` into `grid`.
pub fn rasterize_capsule(grid: &mut Array3<bool>, a: [f64; 3], b: [f64; 3], radius: f64) {
    let (d, h, w) = grid.dim();
    let lo = |v: f64| ((v - radius).floor().max(0.0)) as usize;
    let hi = |v: f64, n: usize| (((v + radius).ceil() as usize) + 1).min(n);
    let (z0, z1) = (lo(a[0].min(b[0])), hi(a[0].max(b[0]), d));
    let (y0, y1) = (lo(a[1].min(b[1])), hi(a[1].max(b[1]), h));
    let (x0, x1) = (lo(a[2].min(b[2])), hi(a[2].max(b[2]), w));
    for z in z0..z1 {
        for y in y0..y1 {
            for x in x0..x1 {
                if !grid[[z, y, x]]
                    && capsule_distance([z as f64, y as f64, x as f64], a, b) <= radius
                {
                    grid[[z, y, x]] = true;
                }
            }
        }
    }
}

/// Centerline voxels of a segment as a clean 26-connected digital line:
/// one step per dominant-axis voxel, so consecutive voxels differ by at most
/// one in every axis and the path length stays close to the Euclidean one.
fn centerline_voxels(s: &Segment, shape: [usize; 3]) -> Vec<[usize; 3]> {
    let steps = (0..3)
        .map(|a| (s.end[a] - s.start[a]).abs().ceil() as usize)
        .max()
        .unwrap()
        .max(1);
    let mut out: Vec<[usize; 3]> = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let p = [
            s.start[0] + (s.end[0] - s.start[0]) * t,
            s.start[1] + (s.end[1] - s.start[1]) * t,
            s.start[2] + (s.end[2] - s.start[2]) * t,
        ];
        let v = [
            (p[0].round().max(0.0) as usize).min(shape[0] - 1),
            (p[1].round().max(0.0) as usize).min(shape[1] - 1),
            (p[2].round().max(0.0) as usize).min(shape[2] - 1),
        ];
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

fn path_length_mm(voxels: &[[usize; 3]], spacing: [f64; 3]) -> f64 {
    voxels
        .windows(2)
        .map(|w| {
            let dz = (w[1][0] as f64 - w[0][0] as f64) * spacing[0];
            let dy = (w[1][1] as f64 - w[0][1] as f64) * spacing[1];
            let dx = (w[1][2] as f64 - w[0][2] as f64) * spacing[2];
            (dz * dz + dy * dy + dx * dx).sqrt()
        })
        .sum()
}

/// Generates one phantom case. Deterministic in the config's seed.
pub fn generate<T: Real>(cfg: &PhantomConfig) -> Result<PhantomCase<T>> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    // Redraw until the tree is self-avoiding: non-adjacent branches must not
    // touch, or the mask would not be a tree. Deterministic per seed because
    // retries consume the same seeded stream.
    let mut segs = Vec::new();
    let mut ok = false;
    for _ in 0..32 {
        segs = build_tree(cfg, &mut rng);
        fit_tree(cfg, &mut segs)?;
        if !has_collisions(&segs) {
            ok = true;
            break;
        }
    }
    if !ok {
        return Err(NvError::Config(
            "tree is too crowded: branches keep colliding; reduce max_generation or enlarge the volume".into(),
        ));
    }
    let shape = cfg.volume_shape;
    let dims = (shape[0], shape[1], shape[2]);

    let mut lumen = Array3::from_elem(dims, false);
    for s in &segs {
        rasterize_capsule(&mut lumen, s.start, s.end, s.radius);
    }
    let mut wall = Array3::from_elem(dims, false);
    if cfg.wall_thickness > 0.0 {
        for s in &segs {
            rasterize_capsule(&mut wall, s.start, s.end, s.radius + cfg.wall_thickness);
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut volume = Array3::<T>::zeros(dims);
    for ((z, y, x), v) in volume.indexed_iter_mut() {
        let base = if lumen[[z, y, x]] {
            cfg.intensity.lumen
        } else if wall[[z, y, x]] {
            cfg.intensity.wall
        } else {
            cfg.intensity.background
        };
        let n = if cfg.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        *v = T::of(base + n);
    }

    // Exact centerline: child paths start at the parent's end voxel.
    let mut branches: Vec<Branch> = Vec::with_capacity(segs.len());
    let mut skel_voxels: Vec<[usize; 3]> = Vec::new();
    let mut endpoints: Vec<[usize; 3]> = Vec::new();
    let mut branch_points: Vec<[usize; 3]> = Vec::new();
    for s in &segs {
        let voxels = centerline_voxels(s, shape);
        let length_mm = path_length_mm(&voxels, cfg.spacing);
        if s.parent == usize::MAX {
            endpoints.push(voxels[0]);
        }
        if s.generation == cfg.max_generation {
            endpoints.push(*voxels.last().unwrap());
        } else {
            branch_points.push(*voxels.last().unwrap());
        }
        skel_voxels.extend(
            voxels
                .iter()
                .skip(if s.parent == usize::MAX { 0 } else { 1 }),
        );
        branches.push(Branch {
            voxels,
            length_mm,
            generation: s.generation,
        });
    }
    let skeleton = TreeSkeleton {
        voxels: skel_voxels,
        endpoints,
        branch_points,
        branches,
        spacing: cfg.spacing,
    };
    let generation_map: Vec<usize> = segs.iter().map(|s| s.generation).collect();
    let meta = PhantomMeta {
        seed: cfg.seed,
        branch_count: segs.len(),
        max_generation: cfg.max_generation,
        total_length_mm: skeleton.total_length_mm(),
        branches: segs
            .iter()
            .zip(&skeleton.branches)
            .map(|(s, b)| BranchMeta {
                generation: s.generation,
                length_mm: b.length_mm,
                radius_voxels: s.radius,
            })
            .collect(),
        volume_shape: shape,
        spacing: cfg.spacing,
    };
    Ok(PhantomCase {
        volume: Volume::new(volume, cfg.spacing)?,
        mask: BinaryMask::new(lumen, cfg.spacing)?,
        skeleton,
        generation_map,
        segments: segs,
        meta,
    })
}

/// Shuffles `cases` with the given seed and splits them into a labeled set
/// and an unlabeled set that exposes volumes only.
pub fn split_dataset<T: Real>(
    cases: Vec<PhantomCase<T>>,
    n_labeled: usize,
    seed: u64,
) -> Result<(Vec<PhantomCase<T>>, Vec<Volume<T>>)> {
    if n_labeled > cases.len() {
        return Err(NvError::Contract(format!(
            "n_labeled {} exceeds case count {}",
            n_labeled,
            cases.len()
        )));
    }
    let mut idx: Vec<usize> = (0..cases.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..idx.len()).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    let mut unlabeled = Vec::with_capacity(cases.len() - n_labeled);
    let mut cases: Vec<Option<PhantomCase<T>>> = cases.into_iter().map(Some).collect();
    for (rank, &i) in idx.iter().enumerate() {
        let case = cases[i].take().unwrap();
        if rank < n_labeled {
            labeled.push(case);
        } else {
            unlabeled.push(case.volume);
        }
    }
    Ok((labeled, unlabeled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::compute_fineness;

    fn quick_cfg() -> PhantomConfig {
        PhantomConfig {
            max_generation: 3,
            volume_shape: [48, 96, 96],
            root_radius: 4.0,
            noise_sigma: 30.0,
            seed: 7,
            ..Default::default()
        }
    }

    fn count_components_26(m: &Array3<bool>) -> usize {
        let (d, h, w) = m.dim();
        let mut seen = Array3::from_elem(m.dim(), false);
        let mut n = 0;
        for ((z, y, x), &v) in m.indexed_iter() {
            if !v || seen[[z, y, x]] {
                continue;
            }
            n += 1;
            let mut stack = vec![[z, y, x]];
            seen[[z, y, x]] = true;
            while let Some(c) = stack.pop() {
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (nz, ny, nx) =
                                (c[0] as i64 + dz, c[1] as i64 + dy, c[2] as i64 + dx);
                            if nz < 0
                                || ny < 0
                                || nx < 0
                                || nz >= d as i64
                                || ny >= h as i64
                                || nx >= w as i64
                            {
                                continue;
                            }
                            let p = [nz as usize, ny as usize, nx as usize];
                            if m[p] && !seen[p] {
                                seen[p] = true;
                                stack.push(p);
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn generation_zero_is_a_single_tube() {
        let cfg = PhantomConfig {
            max_generation: 0,
            volume_shape: [32, 32, 32],
            root_radius: 3.0,
            seed: 1,
            ..Default::default()
        };
        let case = generate::<f32>(&cfg).unwrap();
        assert_eq!(case.meta.branch_count, 1);
        assert_eq!(case.skeleton.branch_count(), 1);
        assert!(case.generation_map.iter().all(|&g| g == 0));
    }

    #[test]
    fn complete_binary_tree_branch_count_is_closed_form() {
        let case = generate::<f32>(&quick_cfg()).unwrap();
        assert_eq!(case.meta.branch_count, 15); // 2^(3+1) - 1
        assert_eq!(case.skeleton.branch_count(), 15);
        assert_eq!(case.skeleton.max_generation(), 3);
        for g in 0..=3usize {
            assert_eq!(
                case.generation_map.iter().filter(|&&x| x == g).count(),
                1 << g
            );
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate::<f32>(&quick_cfg()).unwrap();
        let b = generate::<f32>(&quick_cfg()).unwrap();
        assert_eq!(a.volume.data, b.volume.data);
        assert_eq!(a.mask.data, b.mask.data);
        let c = generate::<f32>(&PhantomConfig {
            seed: 8,
            ..quick_cfg()
        })
        .unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn mask_is_one_connected_component() {
        let case = generate::<f32>(&quick_cfg()).unwrap();
        assert_eq!(count_components_26(&case.mask.data), 1);
    }

    #[test]
    fn skeleton_lies_inside_mask() {
        let case = generate::<f32>(&quick_cfg()).unwrap();
        for &v in &case.skeleton.voxels {
            assert!(case.mask.data[v], "skeleton voxel {v:?} outside mask");
        }
    }

    #[test]
    fn tree_is_shrunk_to_fit_small_volumes() {
        let cfg = PhantomConfig {
            max_generation: 2,
            volume_shape: [40, 80, 80],
            root_radius: 3.0,
            root_length: 60.0, // would overshoot without shrinking
            seed: 3,
            ..Default::default()
        };
        let case = generate::<f32>(&cfg).unwrap();
        assert_eq!(case.meta.branch_count, 7);
        assert!(case.mask.count() > 0);
        // The root segment really was shrunk below the requested length.
        let root = &case.segments[0];
        let len = ((root.end[0] - root.start[0]).powi(2)
            + (root.end[1] - root.start[1]).powi(2)
            + (root.end[2] - root.start[2]).powi(2))
        .sqrt();
        assert!(len < 60.0);
    }

    #[test]
    fn impossible_tree_is_a_config_error() {
        let cfg = PhantomConfig {
            max_generation: 2,
            volume_shape: [10, 12, 12],
            root_radius: 4.0,
            radius_ratio: 0.9,
            seed: 3,
            ..Default::default()
        };
        assert!(matches!(generate::<f32>(&cfg), Err(NvError::Config(_))));
    }

    #[test]
    fn radius_floor_is_validated() {
        let cfg = PhantomConfig {
            max_generation: 8,
            root_radius: 2.0,
            radius_ratio: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fineness_increases_with_generation() {
        // A cuboid holding only generation-g branches must score strictly
        // higher fineness than one holding only generation-(g-2) branches.
        let case = generate::<f32>(&quick_cfg()).unwrap();
        let single_branch_fineness = |gen: usize| -> f64 {
            let s = case.segments.iter().find(|s| s.generation == gen).unwrap();
            let mut grid = Array3::from_elem(
                (
                    case.meta.volume_shape[0],
                    case.meta.volume_shape[1],
                    case.meta.volume_shape[2],
                ),
                false,
            );
            rasterize_capsule(&mut grid, s.start, s.end, s.radius);
            compute_fineness(&grid)
        };
        let f1 = single_branch_fineness(1);
        let f3 = single_branch_fineness(3);
        assert!(
            f3 > f1,
            "generation-3 fineness {f3} should exceed generation-1 fineness {f1}"
        );
        let f0 = single_branch_fineness(0);
        let f2 = single_branch_fineness(2);
        assert!(f2 > f0);
    }

    #[test]
    fn split_boundary_cases() {
        let cases: Vec<PhantomCase<f32>> = (0..4)
            .map(|i| {
                generate(&PhantomConfig {
                    seed: i,
                    max_generation: 0,
                    volume_shape: [24, 24, 24],
                    root_radius: 2.5,
                    ..Default::default()
                })
                .unwrap()
            })
            .collect();
        let (l, u) = split_dataset(cases.clone(), 4, 9).unwrap();
        assert_eq!(l.len(), 4);
        assert!(u.is_empty());
        let (l, u) = split_dataset(cases.clone(), 1, 9).unwrap();
        assert_eq!(l.len(), 1);
        assert_eq!(u.len(), 3);
        assert!(split_dataset(cases, 5, 9).is_err());
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        let make = || -> Vec<PhantomCase<f32>> {
            (0..6)
                .map(|i| {
                    generate(&PhantomConfig {
                        seed: i,
                        max_generation: 0,
                        volume_shape: [24, 24, 24],
                        root_radius: 2.5,
                        ..Default::default()
                    })
                    .unwrap()
                })
                .collect()
        };
        let (l1, _) = split_dataset(make(), 2, 42).unwrap();
        let (l2, _) = split_dataset(make(), 2, 42).unwrap();
        let seeds1: Vec<u64> = l1.iter().map(|c| c.meta.seed).collect();
        let seeds2: Vec<u64> = l2.iter().map(|c| c.meta.seed).collect();
        assert_eq!(seeds1, seeds2);
    }

    #[test]
    fn thinned_skeleton_matches_generator_counts() {
        // The mask-derived skeleton must reproduce the construction's branch
        // count exactly, and, for trees whose branch lengths dominate their
        // radii (the regime where the tube-union medial axis tracks the
        // per-segment centerlines), total length within 5%.
        let cfg = PhantomConfig {
            max_generation: 2,
            volume_shape: [96, 112, 112],
            root_radius: 2.5,
            radius_ratio: 0.75,
            length_ratio: 0.9,
            branch_angle: 30.0,
            root_length: 30.0,
            asymmetry: 0.08,
            noise_sigma: 0.0,
            seed: 5,
            ..Default::default()
        };
        let case = generate::<f32>(&cfg).unwrap();
        let skel = crate::metrics::skeletonize(
            &case.mask,
            &crate::metrics::SkeletonConfig::default(),
        );
        assert_eq!(skel.branch_count(), case.meta.branch_count);
        assert_eq!(skel.max_generation(), case.meta.max_generation);
        let l_thin = skel.total_length_mm();
        let l_true = case.meta.total_length_mm;
        let rel = (l_thin - l_true).abs() / l_true;
        assert!(
            rel <= 0.05,
            "thinned length {l_thin:.1} vs analytic {l_true:.1} (rel {rel:.3})"
        );
        // Thicker anatomical defaults still agree on counts.
        let case = generate::<f32>(&PhantomConfig {
            noise_sigma: 0.0,
            ..quick_cfg()
        })
        .unwrap();
        let skel = crate::metrics::skeletonize(
            &case.mask,
            &crate::metrics::SkeletonConfig::default(),
        );
        assert_eq!(skel.branch_count(), case.meta.branch_count);
    }
}
